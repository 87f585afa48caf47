use orchard_graph::preprocess::{remove_ground, GroundParams};
use orchard_graph::synth::{generate_orchard, OrchardSpec};
use orchard_graph::MatterClass;

#[test]
fn generator_ground_is_recovered() {
    for seed in 0..3 {
        let spec = OrchardSpec {
            rows: 2,
            per_row: 2,
            noise: 0.02,
            seed,
            ..OrchardSpec::default()
        };
        let o = generate_orchard(&spec).unwrap();
        let part = remove_ground(&o.cloud, GroundParams::default()).unwrap();
        let truth: Vec<usize> = (0..o.cloud.len())
            .filter(|&i| o.cloud.points()[i].matter_class == Some(MatterClass::Ground))
            .collect();
        let found = truth.iter().filter(|&&i| part.is_ground(i)).count();
        let recall = found as f64 / truth.len() as f64;
        assert!(recall >= 0.99, "seed {seed}: ground recall {recall}");
    }
}

#[test]
fn ground_points_satisfy_the_lateral_minimum_rule() {
    let o = generate_orchard(&OrchardSpec {
        rows: 1,
        per_row: 2,
        noise: 0.05,
        seed: 11,
        ..OrchardSpec::default()
    })
    .unwrap();
    let params = GroundParams::default();
    let part = remove_ground(&o.cloud, params).unwrap();
    let pts = o.cloud.points();
    // Brute-force check on a sample of points.
    for i in (0..pts.len()).step_by(97) {
        let p = pts[i].position();
        let local_min = pts
            .iter()
            .filter(|q| ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt() <= params.radius)
            .map(|q| q.z)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(part.is_ground(i), p.z - local_min <= params.tolerance, "point {i}");
    }
}
