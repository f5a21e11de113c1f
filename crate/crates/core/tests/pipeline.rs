use std::collections::HashMap;

use baselayer::analysis::{analyze_checkpoint, specialization_table};
use baselayer::io;
use baselayer::rng::{derived_rng, streams};
use baselayer::trainer::{Checkpoint, TaskParams};
use baselayer::{assign_greedy, compute_scores, train_toy, ExpertSet, SyntheticTask, TrainConfig};

fn trained(seed: u64) -> Checkpoint {
    let task = SyntheticTask::generate(&TaskParams::default(), seed).unwrap();
    let experts = ExpertSet::init(seed, 4, 8, 1).unwrap();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train_toy(&task, experts, &config).unwrap().checkpoint
}

#[test]
fn specialized_experts_follow_cluster_ids() {
    let ckpt = trained(11);
    let task = &ckpt.task;
    let mut rng = derived_rng(11, streams::EVAL);
    let mut sequences = Vec::new();
    let mut routes = Vec::new();
    for w in 0..4 {
        let s = task.sample_stream(256, w, &mut rng).unwrap();
        let a = assign_greedy(&compute_scores(&s.tokens, &ckpt.experts).unwrap());
        sequences.push(s.tokens.token_ids().to_vec());
        routes.push(a.expert_of().to_vec());
    }
    let bos = (task.num_clusters * task.tokens_per_cluster) as u32;
    let table = specialization_table(&sequences, &routes, 4, 5, bos).unwrap();

    // direct bigram counts per expert
    let mut direct: Vec<HashMap<u32, usize>> = vec![HashMap::new(); 4];
    for (seq, route) in sequences.iter().zip(&routes) {
        for t in 0..seq.len() {
            let prev = if t == 0 { bos } else { seq[t - 1] };
            *direct[route[t]].entry(prev).or_default() += 1;
        }
    }
    let mut specialized = 0;
    for (e, list) in table.experts.iter().enumerate() {
        for p in list {
            assert_eq!(direct[e][&p.token], p.count);
        }
        let top_count = direct[e].values().copied().max().unwrap_or(0);
        assert_eq!(list.first().map_or(0, |p| p.count), top_count);

        let routed: usize = direct[e].values().sum();
        if routed < 64 {
            continue;
        }
        let cluster_of = |id: u32| id as usize / task.tokens_per_cluster;
        let mut per_cluster = vec![0usize; task.num_clusters + 1];
        for p in list {
            per_cluster[cluster_of(p.token).min(task.num_clusters)] += p.count;
        }
        let best = *per_cluster.iter().max().unwrap();
        if best * 2 > per_cluster.iter().sum::<usize>() {
            specialized += 1;
        }
    }
    assert!(
        specialized >= 2,
        "only {specialized} experts concentrate on one cluster's ids"
    );
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let task = SyntheticTask::generate(&TaskParams::default(), 3).unwrap();
    let config = TrainConfig {
        seed: 3,
        steps: 5,
        ..TrainConfig::default()
    };
    let ckpt = train_toy(&task, ExpertSet::init(3, 4, 8, 2).unwrap(), &config)
        .unwrap()
        .checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    io::save(&ckpt, &path).unwrap();
    let back: Checkpoint = io::load(&path).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn checkpoint_analysis_balance_is_uniform_in_training() {
    let task = SyntheticTask::generate(&TaskParams::default(), 5).unwrap();
    let config = TrainConfig {
        seed: 5,
        steps: 20,
        ..TrainConfig::default()
    };
    let ckpt = train_toy(&task, ExpertSet::init(5, 4, 8, 1).unwrap(), &config)
        .unwrap()
        .checkpoint;
    let a = analyze_checkpoint(&ckpt, 5, 5).unwrap();
    assert!(a.training_balance.usage.iter().all(|&u| u == 0.25));
    assert!((a.testing_balance.usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.testing_balance.usage.windows(2).all(|w| w[0] >= w[1]));
    assert!(a
        .specialization
        .experts
        .iter()
        .all(|l| l.windows(2).all(|w| w[0].count >= w[1].count)));
}
