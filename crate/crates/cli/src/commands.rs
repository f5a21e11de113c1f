use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use baselayer::analysis::{analyze_checkpoint, throughput_report, ThroughputSetting};
use baselayer::io;
use baselayer::rng::{derived_rng, streams};
use baselayer::trainer::{Checkpoint, TaskParams};
use baselayer::{
    route_and_apply, solve_balanced, solve_oracle, train_toy, AssignmentResult, ClipConfig,
    ExpertSet, Matrix, Mode, SyntheticTask, TokenBatch, TrainConfig,
};

use crate::config::{Format, RunConfig, RunMode};
use crate::failure::Failure;

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("baselayer-out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn ext(cfg: &RunConfig) -> &'static str {
    match cfg.format {
        Format::Json => "json",
        Format::Csv => "csv",
    }
}

fn mode(cfg: &RunConfig) -> Mode {
    match cfg.mode {
        RunMode::Train => Mode::Train,
        RunMode::Test => Mode::Test,
    }
}

fn with_path(path: &Path) -> impl Fn(baselayer::Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    }
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    config: serde_json::Value,
    #[serde(flatten)]
    result: &'a AssignmentResult,
}

pub fn solve(cfg: &RunConfig, scores_path: &Path, oracle: bool) -> Result<(), Failure> {
    let scores = io::load_scores_csv(scores_path).map_err(with_path(scores_path))?;
    let result = if oracle {
        solve_oracle(&scores)?
    } else {
        solve_balanced(&scores, &cfg.auction().resolve(&scores)?)?
    };
    let text = match cfg.format {
        Format::Json => pretty(&SolveOutput {
            config: cfg.to_value(),
            result: &result,
        }),
        Format::Csv => {
            let mut s = cfg.comment_line();
            s.push_str(&format!(
                "# objective={} iterations_used={} fell_back_to_greedy={}\ntoken,expert\n",
                result.objective, result.iterations_used, result.fell_back_to_greedy
            ));
            for (t, e) in result.assignment.expert_of().iter().enumerate() {
                s.push_str(&format!("{t},{e}\n"));
            }
            s
        }
    };
    match &cfg.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn matrix_output(cfg: &RunConfig, m: &Matrix) -> String {
    match cfg.format {
        Format::Json => pretty(&json!({ "config": cfg.to_value(), "matrix": m })),
        Format::Csv => cfg.comment_line() + &io::matrix_to_csv(m),
    }
}

pub fn simulate(cfg: &RunConfig, experts_zero: bool) -> Result<(), Failure> {
    let mut experts = ExpertSet::init(cfg.seed, cfg.experts, cfg.dim, cfg.blocks)?;
    if experts_zero {
        experts = experts.with_zero_networks();
    }
    let mut r = derived_rng(cfg.seed, streams::DATA);
    let batches: Vec<TokenBatch> = (0..cfg.experts)
        .map(|w| {
            TokenBatch::from_features(Matrix::random_normal(cfg.tokens, cfg.dim, 1.0, &mut r), w)
        })
        .collect::<baselayer::Result<_>>()?;
    let routed = route_and_apply(&batches, &experts, &cfg.auction(), cfg.seed, mode(cfg))?;

    let inputs = Matrix::vstack(batches.iter().map(TokenBatch::features), cfg.dim);
    let outputs = Matrix::vstack(routed.outputs.iter().map(|o| &o.outputs), cfg.dim);
    let max_abs_change = inputs
        .data()
        .iter()
        .zip(outputs.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let dir = out_dir(cfg)?;
    write(
        &dir,
        "simulate.json",
        &pretty(&json!({
            "config": cfg.to_value(),
            "outputs_equal_inputs": inputs == outputs,
            "max_abs_change": max_abs_change,
            "expert_of": routed.expert_of,
            "trace": routed.trace,
        })),
    )?;
    write(
        &dir,
        &format!("inputs.{}", ext(cfg)),
        &matrix_output(cfg, &inputs),
    )?;
    write(
        &dir,
        &format!("outputs.{}", ext(cfg)),
        &matrix_output(cfg, &outputs),
    )
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let params = TaskParams {
        num_clusters: cfg.clusters,
        dim: cfg.dim,
        ..TaskParams::default()
    };
    let task = SyntheticTask::generate(&params, cfg.seed)?;
    let experts = ExpertSet::init(cfg.seed, cfg.experts, cfg.dim, cfg.blocks)?;
    let config = TrainConfig {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        clip: ClipConfig::new(cfg.clip)?,
        seed: cfg.seed,
        tokens_per_worker: cfg.tokens,
        auction: cfg.auction(),
        ..TrainConfig::default()
    };
    let outcome = train_toy(&task, experts, &config)?;
    let dir = out_dir(cfg)?;
    let log = match cfg.format {
        Format::Csv => cfg.comment_line() + &outcome.log.to_csv(),
        Format::Json => {
            pretty(&json!({ "config": cfg.to_value(), "records": outcome.log.records }))
        }
    };
    write(&dir, &format!("log.{}", ext(cfg)), &log)?;
    write(
        &dir,
        "summary.json",
        &pretty(&json!({ "config": cfg.to_value(), "summary": outcome.log.summary })),
    )?;
    let ckpt = io::to_json_with_config(&outcome.checkpoint, Some(&cfg.to_value()))?;
    write(&dir, "checkpoint.json", &(ckpt + "\n"))
}

pub fn analyze(cfg: &RunConfig, checkpoint: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(checkpoint)
        .map_err(|e| Failure::io(format!("cannot read {}: {e}", checkpoint.display())))?;
    let ckpt: Checkpoint = io::from_json(&text).map_err(with_path(checkpoint))?;
    let a = analyze_checkpoint(&ckpt, cfg.top_k, cfg.seed)?;
    let dir = out_dir(cfg)?;
    let tagged =
        |value: serde_json::Value| pretty(&json!({ "config": cfg.to_value(), "report": value }));
    for (name, report) in [
        ("balance_training", &a.training_balance),
        ("balance_testing", &a.testing_balance),
    ] {
        let body = match cfg.format {
            Format::Json => tagged(serde_json::to_value(report).expect("report serializes")),
            Format::Csv => cfg.comment_line() + &report.to_csv(),
        };
        write(&dir, &format!("{name}.{}", ext(cfg)), &body)?;
        write(
            &dir,
            &format!("{name}.plot.csv"),
            &(cfg.comment_line() + &report.plot_data()),
        )?;
    }
    let table = match cfg.format {
        Format::Json => tagged(serde_json::to_value(&a.specialization).expect("table serializes")),
        Format::Csv => cfg.comment_line() + &a.specialization.to_csv(),
    };
    write(&dir, &format!("specialization.{}", ext(cfg)), &table)?;
    write(
        &dir,
        "analysis.json",
        &pretty(&json!({
            "config": cfg.to_value(),
            "testing_purity": a.testing_purity,
            "training_usage_sum": a.training_balance.usage.iter().sum::<f64>(),
            "testing_usage_sum": a.testing_balance.usage.iter().sum::<f64>(),
        })),
    )
}

pub fn bench(cfg: &RunConfig) -> Result<(), Failure> {
    let mut expert_counts = vec![];
    let mut e = 1;
    while e <= cfg.experts {
        expert_counts.push(e);
        e *= 2;
    }
    let settings: Vec<ThroughputSetting> = expert_counts
        .iter()
        .flat_map(|&experts| {
            (1..=cfg.blocks.max(2)).map(move |blocks| ThroughputSetting {
                experts,
                blocks,
                dim: cfg.dim,
                tokens_per_worker: cfg.tokens,
            })
        })
        .collect();
    let report = throughput_report(&settings, cfg.repetitions, cfg.seed)?;
    let body = match cfg.format {
        Format::Json => pretty(&json!({ "config": cfg.to_value(), "report": report })),
        Format::Csv => {
            let mut s = cfg.comment_line();
            s.push_str("experts,blocks,dim,tokens_per_worker,median_tokens_per_second,band_low,band_high\n");
            for r in &report.rows {
                let st = r.setting;
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    st.experts,
                    st.blocks,
                    st.dim,
                    st.tokens_per_worker,
                    r.median_tokens_per_second,
                    r.band.0,
                    r.band.1
                ));
            }
            s
        }
    };
    write(&out_dir(cfg)?, &format!("throughput.{}", ext(cfg)), &body)
}
