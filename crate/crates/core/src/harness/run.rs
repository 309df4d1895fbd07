use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::datagen::{generate_stream, generate_synthetic, partition};
use crate::error::{Error, Result};
use crate::fedcore::{evaluate, run_round, DevicePool, RoundRecord, ServerState};
use crate::nnkernel::Model;
use crate::pruner::{fedap, fixed_rate_prune, flops_count, PruningPlan, RateEstimate, SnapshotPair};

/// Runtime knobs that must not influence results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for local updates and rate estimation; 0 picks the
    /// rayon default.
    pub workers: usize,
    /// Overrides `config.output_dir`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub round: usize,
    pub plan: PruningPlan,
    pub estimates: Vec<RateEstimate>,
    pub divergences: Vec<f64>,
    pub mflops_before: f64,
    pub mflops_after: f64,
    pub params_before: usize,
    pub params_after: usize,
}

/// Condensed view of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub final_server_accuracy: Option<f64>,
    pub target_accuracy: f64,
    /// Rounds completed when test accuracy first reached the target.
    #[serde(with = "nan_sentinel")]
    pub rounds_to_target: Option<f64>,
    /// Simulated device seconds at that point.
    #[serde(with = "nan_sentinel")]
    pub seconds_to_target: Option<f64>,
    pub total_device_seconds: f64,
    pub total_device_mflops: f64,
    pub initial_mflops: f64,
    pub final_mflops: f64,
    pub initial_params: usize,
    pub final_params: usize,
    pub pruned_at_round: Option<usize>,
    pub p_star: Option<f64>,
    /// Filters kept per pruned layer, `"before->after"`.
    pub plan_digest: Option<Vec<String>>,
    pub dataset_digest: String,
}

/// Serializes `None` as the string `"NaN"` and `Some(x)` as a number.
mod nan_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NaN"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "NaN" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"NaN\", got {s:?}"))),
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsEvent {
    Round(RoundRecord),
    Prune(PruneEvent),
    Summary(SummaryReport),
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub prune: Option<PruneEvent>,
    pub summary: SummaryReport,
    pub final_model: Model,
    pub out_dir: Option<PathBuf>,
}

const CSV_HEADER: &str = "round,server_accuracy,test_accuracy,test_loss,train_loss,tau_eff,selected,\
device_mflops,device_seconds,cumulative_device_seconds,model_mflops";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_row(r: &RoundRecord) -> String {
    let selected: Vec<String> = r.selected.iter().map(usize::to_string).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.round,
        opt(r.server_accuracy),
        opt(r.test_accuracy),
        opt(r.test_loss),
        r.train_loss,
        r.tau_eff,
        selected.join(";"),
        r.device_mflops,
        r.device_seconds,
        r.cumulative_device_seconds,
        r.model_mflops
    )
}

struct Sinks {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        let mut csv = create("metrics.csv")?;
        writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        Ok(Sinks {
            dir: dir.to_path_buf(),
            jsonl: create("metrics.jsonl")?,
            csv,
            timing: create("timing.jsonl")?,
        })
    }

    fn event(&mut self, ev: &MetricsEvent) -> Result<()> {
        let line = serde_json::to_string(ev)?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))?;
        if let MetricsEvent::Round(r) = ev {
            writeln!(self.csv, "{}", csv_row(r)).map_err(|e| Error::io(self.dir.join("metrics.csv"), e))?;
            writeln!(
                self.timing,
                "{{\"round\":{},\"wall_seconds\":{}}}",
                r.round, r.wall_seconds
            )
            .map_err(|e| Error::io(self.dir.join("timing.jsonl"), e))?;
        }
        Ok(())
    }

    fn file(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in [
            (&mut self.jsonl, "metrics.jsonl"),
            (&mut self.csv, "metrics.csv"),
            (&mut self.timing, "timing.jsonl"),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }
}

/// Runs a full experiment. Results depend only on `config`; when an output
/// directory is set, metrics are streamed there as rounds complete.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let out_dir = opts.out_dir.clone().or_else(|| config.output_dir.clone());
    let mut sinks = out_dir.as_deref().map(Sinks::open).transpose()?;
    let result = pool.install(|| execute(config, sinks.as_mut()));
    if let Some(s) = sinks.as_mut() {
        s.flush()?;
    }
    let (records, prune, summary, final_model) = result?;
    Ok(ExperimentOutput {
        records,
        prune,
        summary,
        final_model,
        out_dir,
    })
}

type Executed = (Vec<RoundRecord>, Option<PruneEvent>, SummaryReport, Model);

fn execute(config: &ExperimentConfig, mut sinks: Option<&mut Sinks>) -> Result<Executed> {
    let started = Instant::now();
    if let Some(s) = sinks.as_deref_mut() {
        s.file("config.toml", &config.to_toml()?)?;
    }
    let train = generate_synthetic(&config.data.train_spec(), config.seed)?;
    let test = generate_stream(&config.data.test_spec(), config.seed, 1)?;
    let parts = partition(&train, &config.partition_spec())?;
    if let Some(s) = sinks.as_deref_mut() {
        s.file("partition.json", &serde_json::to_string(&parts.manifest)?)?;
    }
    let fed = config.fed_config();
    let devices = DevicePool::new(parts.devices)?;
    let initial = config.initial_model()?;
    let mut state = ServerState::new(initial.clone(), parts.server)?;
    let initial_mflops = flops_count(&initial);

    let mut records = Vec::with_capacity(fed.total_rounds);
    let mut prune_event = None;
    let prune_round = config.prune_round();
    for t in 0..fed.total_rounds {
        let (next, record) = run_round(&state, &devices, &fed, config.mode.update_mode(), Some(&test))?;
        state = next;
        info!(
            "round {t}: test acc {:.4}, tau_eff {:.4}",
            record.test_accuracy.unwrap_or(f64::NAN),
            record.tau_eff
        );
        if let Some(s) = sinks.as_deref_mut() {
            s.event(&MetricsEvent::Round(record.clone()))?;
        }
        records.push(record);

        if prune_round == Some(t) {
            let before = state.model.clone();
            let (pruned, plan, estimates, divergences) = match config.mode {
                Mode::FixedRatePrune => {
                    let source = if state.data.is_empty() {
                        &devices.devices[0].data
                    } else {
                        &state.data
                    };
                    let (m, p) =
                        fixed_rate_prune(&before, config.pruning.fixed_rate, source, &config.fedap_config())?;
                    (m, p, Vec::new(), Vec::new())
                }
                _ => {
                    let snapshot = SnapshotPair::new(initial.clone(), before.clone())?;
                    let device_data: Vec<_> = devices.devices.iter().map(|d| d.data.clone()).collect();
                    let out = fedap(&snapshot, &state.data, &device_data, &config.fedap_config())?;
                    (out.model, out.plan, out.estimates, out.divergences)
                }
            };
            let event = PruneEvent {
                round: t,
                plan,
                estimates,
                divergences,
                mflops_before: flops_count(&before),
                mflops_after: flops_count(&pruned),
                params_before: before.param_count(),
                params_after: pruned.param_count(),
            };
            info!(
                "pruned at round {t}: p* = {:.4}, MFLOPs {:.6} -> {:.6}",
                event.plan.p_star, event.mflops_before, event.mflops_after
            );
            if let Some(s) = sinks.as_deref_mut() {
                s.event(&MetricsEvent::Prune(event.clone()))?;
                s.file("plan.json", &event.plan.to_json()?)?;
                s.file("model_pruned.json", &pruned.to_json()?)?;
            }
            state.model = pruned;
            prune_event = Some(event);
        }
    }

    let summary = summarize(config, &records, prune_event.as_ref(), &state, &test, &train, initial_mflops, &initial)?;
    if let Some(s) = sinks.as_deref_mut() {
        s.event(&MetricsEvent::Summary(summary.clone()))?;
        s.file("summary.json", &serde_json::to_string_pretty(&summary)?)?;
        s.file("model_final.json", &state.model.to_json()?)?;
    }
    info!("experiment finished in {:.2}s wall", started.elapsed().as_secs_f64());
    Ok((records, prune_event, summary, state.model))
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    config: &ExperimentConfig,
    records: &[RoundRecord],
    prune: Option<&PruneEvent>,
    state: &ServerState,
    test: &crate::datagen::Dataset,
    train: &crate::datagen::Dataset,
    initial_mflops: f64,
    initial: &Model,
) -> Result<SummaryReport> {
    let (final_acc, final_loss) = match records.last() {
        Some(r) => (
            r.test_accuracy.unwrap_or(f64::NAN),
            r.test_loss.unwrap_or(f64::NAN),
        ),
        None => {
            let e = evaluate(&state.model, test)?;
            (e.accuracy, e.loss)
        }
    };
    let final_server_accuracy = if state.data.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &state.data)?.accuracy)
    };
    let hit = records
        .iter()
        .find(|r| r.test_accuracy.is_some_and(|a| a >= config.target_accuracy));
    Ok(SummaryReport {
        mode: config.mode,
        seed: config.seed,
        rounds: records.len(),
        final_test_accuracy: final_acc,
        final_test_loss: final_loss,
        final_server_accuracy,
        target_accuracy: config.target_accuracy,
        rounds_to_target: hit.map(|r| (r.round + 1) as f64),
        seconds_to_target: hit.map(|r| r.cumulative_device_seconds),
        total_device_seconds: state.device_seconds,
        total_device_mflops: records.iter().map(|r| r.device_mflops).sum(),
        initial_mflops,
        final_mflops: flops_count(&state.model),
        initial_params: initial.param_count(),
        final_params: state.model.param_count(),
        pruned_at_round: prune.map(|p| p.round),
        p_star: prune.map(|p| p.plan.p_star),
        plan_digest: prune.map(|p| {
            p.plan
                .layers
                .iter()
                .map(|l| format!("L{}:{}->{}", l.layer, l.filters_before, l.preserved.len()))
                .collect()
        }),
        dataset_digest: train.digest(),
    })
}
