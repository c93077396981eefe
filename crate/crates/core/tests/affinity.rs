mod common;

use riskid_core::graphs::{build_affinity, gate_mask};

#[test]
fn random_graphs_match_pairwise_evaluation() {
    for seed in 0..500 {
        let g = common::random_graph(seed);
        let n = g.nodes.len();
        let a = build_affinity(&g.features, &g.nodes, g.mode, g.mu, &g.w, &g.w_prime).unwrap();
        let brute = common::brute_affinity(&g);
        let mask = gate_mask(&g.nodes, g.mode, g.mu).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| a.get(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-6, "seed {seed} row {i} sums to {row}");
            for j in 0..n {
                assert_eq!(mask[i * n + j], common::brute_gate(&g, i, j), "seed {seed}");
                if !mask[i * n + j] {
                    assert_eq!(a.get(i, j), 0.0, "seed {seed}");
                }
                assert!((a.get(i, j) - brute[i][j]).abs() < 1e-9, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn single_node_graph_is_identity() {
    let g = (0..).map(common::random_graph).find(|g| g.nodes.len() == 1).unwrap();
    let a = build_affinity(&g.features, &g.nodes, g.mode, g.mu, &g.w, &g.w_prime).unwrap();
    assert_eq!(a.data(), &[1.0]);
}
