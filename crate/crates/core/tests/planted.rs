use biaxis::exec::map_sequential;
use biaxis::synth::{generate_planted, PlantedParams};
use biaxis::train::{grid_search, Dataset, TrainConfig};

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn best_d_star(params: &PlantedParams, config: &TrainConfig, seed: u64) -> usize {
    let inst = generate_planted(params, seed).unwrap();
    let data = Dataset::new(inst.graph, inst.embeddings, seed).unwrap();
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    grid_search(&data, &config).unwrap().best().d_star
}

#[test]
fn small_grid_runs_end_to_end_on_a_planted_instance() {
    let params = PlantedParams {
        n_nodes: 30,
        d: 12,
        k: 2,
        n_concepts: 10,
        ..PlantedParams::default()
    };
    let config = TrainConfig {
        superepochs: 5,
        learning_rates: vec![1e-2],
        lambda_o: vec![1e-2],
        lambda_s: vec![1e-2, 2e-2],
        ..TrainConfig::default()
    };
    let a = best_d_star(&params, &config, 3);
    let b = best_d_star(&params, &config, 3);
    assert_eq!(a, b);
    assert!(a <= params.d);
}

// Twenty instances per arm with the default grid; minutes in release mode.
#[test]
#[ignore]
fn null_instances_select_no_larger_subspaces_than_planted_ones() {
    let planted = PlantedParams {
        k: 3,
        ..PlantedParams::default()
    };
    let null = PlantedParams {
        signal_strength: 0.0,
        ..planted.clone()
    };
    let config = TrainConfig::default();
    let seeds: Vec<u64> = (0..20).collect();
    let with_signal = median(map_sequential(&seeds, |&s| best_d_star(&planted, &config, s)));
    let without = median(map_sequential(&seeds, |&s| best_d_star(&null, &config, s)));
    assert!(without <= with_signal, "null median {without} > planted median {with_signal}");
}
