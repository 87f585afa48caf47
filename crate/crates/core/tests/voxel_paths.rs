//! A* and uniform-cost search agree on real voxel graphs, and path counts
//! match explicit per-target path walks.

use orchard_graph::graph::{aggregate_paths, shortest_path, single_source, Targets};
use orchard_graph::segment::{build_path_model, ModelParams};
use orchard_graph::synth::{generate_orchard, OrchardSpec};

#[test]
fn astar_matches_uniform_cost_on_a_synthetic_tree() {
    let o = generate_orchard(&OrchardSpec {
        rows: 1,
        per_row: 1,
        noise: 0.02,
        seed: 5,
        ..OrchardSpec::default()
    })
    .unwrap();
    let model = build_path_model(&o.cloud, &o.trunks, &ModelParams::default()).unwrap();
    let g = &model.graph;
    let source = model.anchors[0];
    let tree = single_source(g, source);
    let step = (g.len() / 150).max(1);
    for t in (0..g.len()).step_by(step) {
        match shortest_path(g, source, t) {
            Some(p) => {
                assert_eq!(p.cost, tree.dist[t], "cost to {t}");
                assert_eq!(Some(p.nodes), tree.path_to(t), "path to {t}");
            }
            None => assert!(tree.dist[t].is_infinite()),
        }
    }

    let agg = aggregate_paths(g, &[source], Targets::All).unwrap();
    let mut counts = vec![0u32; g.len()];
    for t in 0..g.len() {
        if let Some(path) = tree.path_to(t) {
            for v in path {
                counts[v] += 1;
            }
        }
    }
    assert_eq!(agg.count_max, counts);
    assert_eq!(agg.max_count, counts[source]);
}
