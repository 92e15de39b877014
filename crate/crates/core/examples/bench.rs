// compare rolling-style vs eval-style mAP on identical weights
use maskdet::data::{generate_dataset, load_dataset};
use maskdet::eval::evaluate;
use maskdet::layers::Phase;
use maskdet::model::{build_model, decode, nms, AnchorSet, ModelConfig};
use maskdet::tape::Tape;
use maskdet::train::{calibrate_bn, restore, train, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("maskdet_diag");
    generate_dataset(&dir, 8, 7, 160).unwrap();
    let data = load_dataset(&dir, 160).unwrap();
    let mut cfg = TrainConfig { epochs: 50, batch: 4, seed: 7, ..TrainConfig::default() };
    cfg.weights.bbox = 1.0;
    cfg.weights.obj = 30.0;
    cfg.weights.cls = 1.0;
    let mc = ModelConfig { seed: 7, ..ModelConfig::toy(2) };
    let mut model = build_model::<f32>(mc, AnchorSet::default_for(160)).unwrap();
    let result = train(&mut model, &data, &cfg, |_| {}).unwrap();
    println!("best epoch {} rolling mAP {:.4}", result.best_epoch, result.best_map50);
    restore(&mut model, &result.best_state).unwrap();
    calibrate_bn(&model, &data).unwrap();

    for phase in [Phase::Train, Phase::Infer] {
        let mut per_image = Vec::new();
        for sample in &data {
            let mut t: Tape<f32> = Tape::new();
            let img = t.constant(sample.image.clone());
            let raws = model.forward(&mut t, img, phase).unwrap();
            let mut all = Vec::new();
            for (scale, &raw) in raws.iter().enumerate() {
                all.extend(decode(t.value(raw), &model.anchors, scale, 160, 2, 0.05).unwrap());
            }
            per_image.push((nms(all, 0.45), sample.gts.clone()));
        }
        let rep = evaluate(&per_image, 2);
        println!(
            "{phase:?}: mAP50 {:?} P {:.3} R {:.3} dets {}",
            rep.map50,
            rep.precision,
            rep.recall,
            per_image.iter().map(|(d, _)| d.len()).sum::<usize>()
        );
    }
    // best IoU per gt on image 0, infer phase
    let sample = &data[0];
    let dets = model.detect(&sample.image, 0.05, 0.45).unwrap();
    for (i, gt) in sample.gts.iter().enumerate() {
        let best = dets
            .iter()
            .map(|d| d.bbox.iou(&gt.bbox))
            .fold(0.0f64, f64::max);
        println!("gt {i} class {} box ({:.2},{:.2},{:.2},{:.2}) best IoU {:.3}",
            gt.class_id, gt.bbox.cx, gt.bbox.cy, gt.bbox.w, gt.bbox.h, best);
    }
}
