//! The commands behind the `usd` binary: generate a world, train a variant,
//! evaluate a checkpoint, run the ablation sweep and check gradients.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::ctr::{CtrConfig, CtrParams};
use crate::dataset::{self, Dataset, WorldMeta};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::ComputeGraph;
use crate::metrics::{self, MetricsReport};
use crate::params::ParamStore;
use crate::parallel;
use crate::train::{self, CtrSample, TrainOutput, TrainingSet, Variant};
use crate::uiem::{self, UiemConfig, UiemParams};
use crate::world::{generate_world, UserDayContext, WorldConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// What was run, on what, and what it produced. The embedded config plus
/// the dataset suffice to rerun the command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub variant: Option<Variant>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig, data_dir: Option<&Path>, variant: Option<Variant>) -> Self {
        let run_id = match variant {
            Some(v) => format!("{command}-{v}-seed{}", config.seed),
            None => format!("{command}-seed{}", config.seed),
        };
        Self {
            run_id,
            command: command.to_string(),
            config: config.clone(),
            data_dir: data_dir.map(Path::to_path_buf),
            seed: config.seed,
            variant,
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# run manifest");
        let _ = writeln!(s, "# run_id = {}", self.run_id);
        let _ = writeln!(s, "# command = {}", self.command);
        let _ = writeln!(s, "# seed = {}", self.seed);
        if let Some(v) = self.variant {
            let _ = writeln!(s, "# variant = {v}");
        }
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "# data = {}", d.display());
        }
        for o in &self.outputs {
            let _ = writeln!(s, "# output = {}", o.display());
        }
        for (k, t) in &self.timings {
            let _ = writeln!(s, "# wall_seconds.{k} = {t:.3}");
        }
        s.push_str(&self.config.render());
        s
    }

    /// The manifest is a valid config file: metadata sits in comments.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the world of `config` and writes the dataset into `out`.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<RunManifest> {
    let t0 = Instant::now();
    let world = generate_world(&config.world, config.seed)?;
    let sim = world.simulate()?;
    ensure_dir(out)?;
    dataset::write_dataset(out, &sim.exposures, &sim.contexts)?;
    dataset::write_meta(
        out,
        &WorldMeta {
            config: config.world.clone(),
            seed: config.seed,
        },
    )?;
    let mut m = RunManifest::new("gen", config, None, None);
    m.outputs = vec![
        out.join(dataset::EXPOSURES_FILE),
        out.join(dataset::CONTEXTS_FILE),
        dataset::meta_path(out),
    ];
    m.timings.push(("gen".into(), t0.elapsed().as_secs_f64()));
    m.outputs.push(m.write(out)?);
    Ok(m)
}

/// Dataset plus the world config it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub meta: WorldMeta,
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let meta = dataset::read_meta(dir)?;
    let dataset = dataset::read_dataset(dir)?;
    Ok(LoadedData { dataset, meta })
}

/// Trains one variant. The world section of `config` is ignored in favor of
/// the dataset's own `world.meta`.
pub fn train_variant(config: &RunConfig, data: &LoadedData, variant: Variant) -> Result<TrainOutput> {
    let world = &data.meta.config;
    let set = TrainingSet::build(&data.dataset, variant, world.eval_start_day(), config.ctr.max_behaviors)?;
    let tc = train::TrainConfig {
        variant,
        seed: config.seed,
        ..config.train.clone()
    };
    train::train(&set, world, &config.uiem, &config.ctr, &tc)
}

fn checkpoint_of(config: &RunConfig, variant: Variant, out: &TrainOutput) -> Result<Checkpoint> {
    let mut meta = vec![("variant".to_string(), variant.name().to_string())];
    for line in config.render().lines() {
        meta.push(("config".to_string(), line.to_string()));
    }
    let mut params = ParamStore::new();
    params.extend(&out.uiem.store)?;
    params.extend(&out.ctr.store)?;
    Ok(Checkpoint { meta, params })
}

/// Trained models restored from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel {
    pub variant: Variant,
    pub config: RunConfig,
    pub uiem: UiemParams,
    pub ctr: CtrParams,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let variant = ck
        .meta_value("variant")
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing @variant", path.display())))?
        .parse::<Variant>()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let text: Vec<&str> = ck.meta_values("config").collect();
    let config = RunConfig::parse(&text.join("\n"))
        .map_err(|e| Error::Checkpoint(format!("{}: embedded config: {e}", path.display())))?;
    let uiem = UiemParams::from_store(&config.uiem, &ck.params.filter_prefix(uiem::PREFIX))?;
    let ctr = CtrParams::from_store(&config.ctr, &ck.params.filter_prefix(crate::ctr::PREFIX))?;
    Ok(LoadedModel {
        variant,
        config,
        uiem,
        ctr,
    })
}

/// Trains `variant` (default: the config's) and writes the checkpoint,
/// `losses.csv` and a manifest into `out`.
pub fn cmd_train(config: &RunConfig, data_dir: &Path, variant: Option<Variant>, out: &Path) -> Result<RunManifest> {
    let variant = variant.unwrap_or(config.train.variant);
    let config = RunConfig {
        train: train::TrainConfig {
            variant,
            ..config.train.clone()
        },
        ..config.clone()
    };
    let t0 = Instant::now();
    let data = load_data(data_dir)?;
    let trained = train_variant(&config, &data, variant)?;
    let elapsed = t0.elapsed().as_secs_f64();

    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint_of(&config, variant, &trained)?.save(&ckpt)?;
    let losses = out.join(LOSSES_FILE);
    write_file(&losses, &train::render_losses(&trained.losses))?;

    let mut m = RunManifest::new("train", &config, Some(data_dir), Some(variant));
    m.outputs = vec![ckpt, losses];
    m.timings.push(("train".into(), elapsed));
    m.outputs.push(m.write(out)?);
    Ok(m)
}

/// Evaluates trained models on the held-out days of `data`.
pub fn evaluate_models(ctr: &CtrParams, data: &LoadedData, max_behaviors: usize) -> Result<MetricsReport> {
    let samples = train::eval_samples(&data.dataset, data.meta.config.eval_start_day(), max_behaviors)?;
    evaluate_samples(ctr, &samples)
}

pub fn evaluate_samples(ctr: &CtrParams, samples: &[CtrSample]) -> Result<MetricsReport> {
    let inputs: Vec<_> = samples.iter().map(|s| s.input()).collect();
    let scores = ctr.predict_many(&inputs)?;
    let users: Vec<u32> = samples.iter().map(|s| s.record.user_id).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.record.label).collect();
    metrics::evaluate(&users, &scores, &labels)
}

/// Writes `metrics.csv` for a checkpoint into `out`.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<MetricsReport> {
    let model = load_model(checkpoint)?;
    let data = load_data(data_dir)?;
    let report = evaluate_models(&model.ctr, &data, model.config.ctr.max_behaviors)?;
    ensure_dir(out)?;
    write_file(
        &out.join(METRICS_FILE),
        &metrics::render_metrics(&[(model.variant.name().to_string(), report.clone())]),
    )?;
    Ok(report)
}

/// One `(variant, seed)` arm of the sweep.
#[derive(Debug)]
pub struct ArmResult {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: Result<MetricsReport>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub arms: Vec<ArmResult>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Per-variant medians over the successful arms.
#[derive(Clone, Debug, PartialEq)]
pub struct MedianRow {
    pub variant: Variant,
    pub gauc_avg: f64,
    pub gauc_show: f64,
    pub gauc_click: f64,
    pub auc: f64,
    pub arms: usize,
}

impl AblationTable {
    pub fn failures(&self) -> usize {
        self.arms.iter().filter(|a| a.outcome.is_err()).count()
    }

    pub fn medians(&self) -> Vec<MedianRow> {
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let ok: Vec<&MetricsReport> = self
                .arms
                .iter()
                .filter(|a| a.variant == v)
                .filter_map(|a| a.outcome.as_ref().ok())
                .collect();
            let m = |f: fn(&MetricsReport) -> f64| median(ok.iter().map(|r| f(r)).collect());
            if let (Some(gauc_avg), Some(gauc_show), Some(gauc_click), Some(auc)) =
                (m(|r| r.gauc_avg), m(|r| r.gauc_show), m(|r| r.gauc_click), m(|r| r.auc))
            {
                rows.push(MedianRow {
                    variant: v,
                    gauc_avg,
                    gauc_show,
                    gauc_click,
                    auc,
                    arms: ok.len(),
                });
            }
        }
        rows
    }

    pub fn median_of(&self, v: Variant) -> Option<MedianRow> {
        self.medians().into_iter().find(|r| r.variant == v)
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("variant,seed,status,gauc_avg,gauc_show,gauc_click,auc,users_evaluated,users_excluded\n");
        for a in &self.arms {
            match &a.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        s,
                        "{},{},ok,{:?},{:?},{:?},{:?},{},{}",
                        a.variant, a.seed, r.gauc_avg, r.gauc_show, r.gauc_click, r.auc, r.users_evaluated, r.users_excluded
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{},{},failed,,,,,,", a.variant, a.seed);
                }
            }
        }
        for m in self.medians() {
            let _ = writeln!(
                s,
                "{},median,ok,{:?},{:?},{:?},{:?},,",
                m.variant, m.gauc_avg, m.gauc_show, m.gauc_click, m.auc
            );
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
            "variant", "arms", "gauc_avg", "gauc_show", "gauc_click", "auc"
        );
        for m in self.medians() {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
                m.variant.name(),
                m.arms,
                m.gauc_avg,
                m.gauc_show,
                m.gauc_click,
                m.auc
            );
        }
        for a in &self.arms {
            if let Err(e) = &a.outcome {
                let _ = writeln!(s, "FAILED {} seed {}: {e}", a.variant, a.seed);
            }
        }
        s
    }
}

/// Trains and evaluates `variants` for every seed. Arms run in parallel and
/// are reported in `(variant, seed)` order.
pub fn run_ablation(config: &RunConfig, data: &LoadedData, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let eval = train::eval_samples(&data.dataset, data.meta.config.eval_start_day(), config.ctr.max_behaviors)?;
    let arms: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = parallel::map(&arms, |&(variant, seed)| {
        let cfg = RunConfig {
            seed,
            ..config.clone()
        };
        let outcome = train_variant(&cfg, data, variant).and_then(|t| evaluate_samples(&t.ctr, &eval));
        ArmResult {
            variant,
            seed,
            outcome,
        }
    });
    Ok(AblationTable { arms: results })
}

/// Full sweep over every variant; writes `ablation.csv` and a manifest.
pub fn cmd_ablate(config: &RunConfig, data_dir: &Path, seeds: &[u64], out: &Path) -> Result<AblationTable> {
    let t0 = Instant::now();
    let data = load_data(data_dir)?;
    let table = run_ablation(config, &data, &Variant::ALL, seeds)?;
    ensure_dir(out)?;
    let csv = out.join(ABLATION_FILE);
    write_file(&csv, &table.render_csv())?;
    let mut m = RunManifest::new("ablate", config, Some(data_dir), None);
    m.outputs.push(csv);
    m.timings.push(("ablate".into(), t0.elapsed().as_secs_f64()));
    m.write(out)?;
    Ok(table)
}

/// Model sizes used by `gradcheck`: small enough for an exhaustive check.
pub fn gradcheck_configs() -> (UiemConfig, CtrConfig) {
    (
        UiemConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            seq_len: 8,
            ..UiemConfig::default()
        },
        CtrConfig {
            dim: 8,
            max_behaviors: 4,
            hidden: 8,
        },
    )
}

/// Checks the analytic gradient of `L_final` for both models on a small
/// world drawn from `seed`, with debias weights from the intent model.
pub fn gradcheck(
    seed: u64,
    alpha: f64,
    beta: f64,
    tolerance: f64,
    corrupt: Option<f64>,
) -> Result<GradCheckReport> {
    let (ucfg, ccfg) = gradcheck_configs();
    let world_cfg = WorldConfig {
        users: 12,
        items: 16,
        num_days: 44,
        eval_days: 2,
        ..WorldConfig::default()
    };
    let sim = generate_world(&world_cfg, seed)?.simulate()?;
    let dataset = Dataset {
        exposures: sim.exposures,
        contexts: sim.contexts,
    };
    let set = TrainingSet::build(&dataset, Variant::Usd, world_cfg.eval_start_day(), ccfg.max_behaviors)?;
    let (uiem0, ctr0) = train::init_models(&ucfg, &ccfg, world_cfg.users, world_cfg.items, seed)?;

    // Prefer samples that carry clicks and behavior history so every path
    // of the CTR model is exercised.
    let mut ctr_batch: Vec<&CtrSample> = set.ctr.iter().filter(|s| !s.behaviors.is_empty()).take(6).collect();
    if ctr_batch.is_empty() {
        ctr_batch = set.ctr.iter().take(6).collect();
    }
    let uiem_batch: Vec<&UserDayContext> = set.uiem.iter().take(4).collect();
    let weights = train::batch_weights(Variant::Usd, &ctr_batch, &uiem0, &set.contexts, crate::debias::ClipRange::DEFAULT)?;

    let mut params = ParamStore::new();
    params.extend(&uiem0.store)?;
    params.extend(&ctr0.store)?;
    let loss = |p: &ParamStore| -> Result<(ComputeGraph, crate::graph::Var)> {
        let uiem = UiemParams {
            config: ucfg.clone(),
            store: p.filter_prefix(uiem::PREFIX),
        };
        let ctr = CtrParams {
            config: ccfg.clone(),
            users: world_cfg.users,
            items: world_cfg.items,
            store: p.filter_prefix(crate::ctr::PREFIX),
        };
        let mut g = ComputeGraph::new();
        let l_ctr = train::ctr_loss_node(&mut g, &ctr, &ctr_batch, &weights)?;
        let (_, _, total) = train::add_intent_losses(&mut g, l_ctr, &uiem, &uiem_batch, alpha, beta)?;
        Ok((g, total))
    };
    finite_diff_check(&params, loss, tolerance, corrupt)
}

/// `gradcheck` for the config's seed and loss weights.
pub fn cmd_gradcheck(config: &RunConfig, corrupt: Option<f64>) -> Result<GradCheckReport> {
    gradcheck(config.seed, config.train.alpha, config.train.beta, 1e-4, corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn manifest_is_a_config_file() {
        let c = RunConfig::default();
        let mut m = RunManifest::new("train", &c, Some(Path::new("data")), Some(Variant::WoD));
        m.timings.push(("train".into(), 1.5));
        let back = RunConfig::parse(&m.render()).unwrap();
        assert_eq!(back, c);
        assert!(m.render().contains("# variant = wo_d"));
    }
}
