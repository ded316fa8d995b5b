use mgca_core::data::{generate_synthetic, SynthSpec};
use mgca_core::kg::{corruption_ranking_accuracy, transe_train, TranseConfig, TripleStore};

fn cluster_store() -> TripleStore {
    let data = generate_synthetic(&SynthSpec {
        topics: 3,
        ..Default::default()
    })
    .unwrap();
    TripleStore::from_triples(data.triples.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())))
}

#[test]
fn three_cluster_graph_ranks_true_triples_first() {
    let store = cluster_store();
    let cfg = TranseConfig {
        dim: 32,
        seed: 11,
        ..Default::default()
    };
    let (emb, _) = transe_train::<f64>(&store, &cfg).unwrap();
    let acc = corruption_ranking_accuracy(&emb, &store, 99);
    assert!(acc >= 0.9, "ranking accuracy {acc}");
}

#[test]
fn moving_average_loss_does_not_increase() {
    let store = cluster_store();
    for seed in 0..5 {
        let cfg = TranseConfig {
            dim: 32,
            seed,
            ..Default::default()
        };
        let (_, losses) = transe_train::<f64>(&store, &cfg).unwrap();
        let avg: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        for w in avg.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {avg:?}");
        }
    }
}
