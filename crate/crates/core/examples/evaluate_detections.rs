//! Scores a hand-written detection list: per-class AP, mAP split, confusion.

use mgml::data::{AnnotatedObject, BBox, ClassSplit, Dataset, Payload, Scene};
use mgml::eval::{confusion_csv, evaluate, Detection, EvalOptions};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).expect("valid box")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = ClassSplit::new("road", vec!["autorickshaw".into(), "car".into()], vec!["excavator".into()])?;
    let objects = [(0, bx(0.0, 0.0, 20.0, 20.0)), (1, bx(40.0, 0.0, 70.0, 25.0)), (2, bx(10.0, 40.0, 40.0, 70.0))];
    let scene = Scene {
        scene_id: "street".into(),
        width: 80.0,
        height: 80.0,
        objects: objects.iter().map(|&(class_id, bbox)| AnnotatedObject { class_id, bbox }).collect(),
        payload: Payload::None,
    };
    let gts = Dataset::new(vec![scene]);
    let det = |class_id, score, bbox| Detection {
        scene_id: "street".into(),
        class_id,
        score,
        bbox,
    };
    let dets = vec![
        det(0, 0.92, bx(1.0, 0.0, 21.0, 20.0)),
        det(1, 0.85, bx(41.0, 1.0, 70.0, 26.0)),
        // The excavator taken for an autorickshaw, and a weaker correct guess.
        det(0, 0.70, bx(11.0, 41.0, 40.0, 70.0)),
        det(2, 0.40, bx(10.0, 42.0, 39.0, 70.0)),
        det(1, 0.60, bx(60.0, 60.0, 78.0, 78.0)),
    ];
    let report = evaluate(&dets, &gts, &split, &EvalOptions::default());
    for c in &report.per_class {
        println!("{:>13} AP {:.3}", c.class, c.ap.unwrap_or(f64::NAN));
    }
    println!("mAP_base {:?} mAP_novel {:?} mean_confusion {:?}", report.map_base, report.map_novel, report.mean_confusion);
    print!("{}", confusion_csv(&report.labels, &report.confusion));
    Ok(())
}
