//! Implementations behind the CLI subcommands. Each command writes its
//! effective config dump alongside its outputs so any artifact can be
//! reproduced from dump + seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::angular::DftPair;
use crate::channelgen::{generate_scene, ChannelScene};
use crate::csinet::CsiNet;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{read_dataset, write_dataset, DatasetHeader};
use crate::harness::report::{
    append_results_csv, summary_table, write_metrics_csv, ResultRow,
};
use crate::mueval::{evaluate_scheme, EvalContext, Scheme};
use crate::rng::derive_seed;
use crate::training::{prepare_scenes, train, MetricsRecord};
use crate::typeii::select_ports;

fn dump_config(cfg: &ExperimentConfig, next_to: &Path) -> Result<PathBuf> {
    let path = next_to.with_extension("config.toml");
    std::fs::write(&path, cfg.dump())?;
    Ok(path)
}

fn generate_scenes(cfg: &ExperimentConfig, count: usize, seed: u64) -> Vec<ChannelScene> {
    let mut scene_cfg = cfg.scene_config();
    scene_cfg.seed = seed;
    (0..count as u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| generate_scene(&scene_cfg, i))
        .collect()
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub struct GenOptions {
    pub scenes: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub struct GenSummary {
    pub path: PathBuf,
    pub scenes: usize,
    pub mean_dl_energy: f64,
    pub port_overlap: f64,
}

impl std::fmt::Display for GenSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "wrote {} ({} scenes)", self.path.display(), self.scenes)?;
        writeln!(f, "mean per-UE DL energy |H|_F^2: {:.6e}", self.mean_dl_energy)?;
        write!(
            f,
            "mean UL/DL top-port overlap at N_p: {:.3}",
            self.port_overlap
        )
    }
}

pub fn run_gen(cfg: &ExperimentConfig, opts: &GenOptions) -> Result<GenSummary> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let count = opts.scenes.unwrap_or(cfg.train_scenes);
    if count == 0 {
        return Err(Error::Config("scene count must be >= 1".into()));
    }
    cfg.validate()?;
    let scenes = generate_scenes(&cfg, count, cfg.seed);
    write_dataset(&opts.out, &scenes, cfg.seed)?;
    dump_config(&cfg, &opts.out)?;

    // Summary statistics: energy and UL/DL port-set overlap.
    let pair = DftPair::new(cfg.n_t(), cfg.subbands)?;
    let mut energy = 0.0;
    let mut overlap = 0.0;
    let mut ue_total = 0usize;
    let probe = scenes.len().min(64);
    for scene in scenes.iter().take(probe) {
        for ue in &scene.ues {
            energy += ue.h_dl.frob_norm_sq();
            let ul = select_ports(&pair.to_angular_delay(&ue.h_ul)?, cfg.port_count)?;
            let dl = select_ports(&pair.to_angular_delay(&ue.h_dl)?, cfg.port_count)?;
            let ul_set: std::collections::HashSet<_> = ul.ports.into_iter().collect();
            let hits = dl.ports.iter().filter(|p| ul_set.contains(p)).count();
            overlap += hits as f64 / cfg.port_count as f64;
            ue_total += 1;
        }
    }
    Ok(GenSummary {
        path: opts.out.clone(),
        scenes: count,
        mean_dl_energy: energy / ue_total as f64,
        port_overlap: overlap / ue_total as f64,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainOptions {
    pub data: PathBuf,
    pub loss: Option<String>,
    pub out: PathBuf,
    pub ablation_no_fill: bool,
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics: Vec<MetricsRecord>,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let last = self.metrics.last();
        writeln!(f, "checkpoint: {}", self.checkpoint.display())?;
        writeln!(f, "metrics:    {}", self.metrics_csv.display())?;
        match last {
            Some(m) => write!(
                f,
                "final epoch {}: stage {}, val MSE {:.6}, val sum rate {:.4}",
                m.epoch, m.stage, m.loss_mse, m.val_sum_rate
            ),
            None => write!(f, "no epochs run"),
        }
    }
}

fn check_dims(cfg: &ExperimentConfig, header: &DatasetHeader, path: &Path) -> Result<()> {
    if header.ue_count as usize != cfg.ue_count
        || header.n_t as usize != cfg.n_t()
        || header.subbands as usize != cfg.subbands
    {
        return Err(Error::Config(format!(
            "dataset {} has (K={}, N_t={}, M={}) but the config expects (K={}, N_t={}, M={})",
            path.display(),
            header.ue_count,
            header.n_t,
            header.subbands,
            cfg.ue_count,
            cfg.n_t(),
            cfg.subbands
        )));
    }
    Ok(())
}

pub fn run_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    if let Some(loss) = &opts.loss {
        cfg.loss_mode = loss.clone();
    }
    cfg.validate()?;
    let (header, scenes) = read_dataset(&opts.data)?;
    check_dims(&cfg, &header, &opts.data)?;
    if scenes.len() <= cfg.val_scenes {
        return Err(Error::Config(format!(
            "dataset has {} scenes; need more than val_scenes = {}",
            scenes.len(),
            cfg.val_scenes
        )));
    }
    let pair = DftPair::new(cfg.n_t(), cfg.subbands)?;
    let prepared = prepare_scenes(&scenes, &pair, cfg.port_count, cfg.sort_method()?)?;
    let split = prepared.len() - cfg.val_scenes;
    let (train_set, val_set) = prepared.split_at(split);

    let mut model_cfg = cfg.model_config();
    model_cfg.ablation_no_fill = opts.ablation_no_fill;
    let mut model = CsiNet::new(
        model_cfg,
        derive_seed(cfg.seed, "model-init", &[u64::from(opts.ablation_no_fill)]),
    )?;
    let metrics = train(
        &mut model,
        train_set,
        val_set,
        &cfg.link_budget(),
        &pair,
        &cfg.train_config(),
    )?;
    save_checkpoint(&opts.out, &model)?;
    let metrics_csv = opts.out.with_extension("metrics.csv");
    write_metrics_csv(&metrics_csv, &metrics)?;
    dump_config(&cfg, &opts.out)?;
    Ok(TrainSummary {
        checkpoint: opts.out.clone(),
        metrics_csv,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalOptions {
    pub data: PathBuf,
    pub scheme: String,
    pub checkpoint: Option<PathBuf>,
    pub results: Option<PathBuf>,
}

fn results_path(cfg: &ExperimentConfig, explicit: Option<&PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => {
            let dir = PathBuf::from(&cfg.output_dir);
            std::fs::create_dir_all(&dir)?;
            Ok(dir.join("results.csv"))
        }
    }
}

fn load_scheme_model(
    cfg: &ExperimentConfig,
    scheme: &str,
    checkpoint: Option<&PathBuf>,
) -> Result<Option<CsiNet>> {
    let ablation = match scheme {
        "csinet" => false,
        "csinet-nofill" => true,
        "perfect-csi" | "typeii-codebook" => return Ok(None),
        other => {
            return Err(Error::Config(format!(
                "unknown scheme `{other}` (expected perfect-csi, typeii-codebook, csinet or csinet-nofill)"
            )))
        }
    };
    let path = checkpoint.ok_or_else(|| {
        Error::Config(format!("scheme `{scheme}` needs --checkpoint"))
    })?;
    let mut model_cfg = cfg.model_config();
    model_cfg.ablation_no_fill = ablation;
    Ok(Some(load_checkpoint(path, &model_cfg)?))
}

pub fn run_eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<ResultRow> {
    cfg.validate()?;
    let (header, mut scenes) = read_dataset(&opts.data)?;
    check_dims(cfg, &header, &opts.data)?;
    scenes.truncate(cfg.eval_scenes);
    let pair = DftPair::new(cfg.n_t(), cfg.subbands)?;
    let model = load_scheme_model(cfg, &opts.scheme, opts.checkpoint.as_ref())?;
    let scheme = match (&opts.scheme[..], &model) {
        ("perfect-csi", _) => Scheme::PerfectCsi,
        ("typeii-codebook", _) => Scheme::TypeiiCodebook,
        (_, Some(m)) => Scheme::Learned(m),
        _ => unreachable!("validated above"),
    };
    let ctx = EvalContext {
        pair: &pair,
        n_p: cfg.port_count,
        sorting: cfg.sort_method()?,
        quant: cfg.quant_config(),
        budget: cfg.link_budget(),
    };
    let report = evaluate_scheme(&scheme, &scenes, &ctx)?;
    let row = ResultRow::from_report(&report, cfg.port_count, cfg.rb_per_subband, &cfg.sorting);
    let out = results_path(cfg, opts.results.as_ref())?;
    append_results_csv(&out, &[row.clone()])?;
    dump_config(cfg, &out)?;
    Ok(row)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub struct SweepOptions {
    pub axis: String,
    pub values: Vec<String>,
    pub parallel: usize,
}

/// Maps a total bit budget back to (Q_a, Q_p) on the standard ladder.
fn quant_bits_for_budget(cfg: &ExperimentConfig, bits: usize) -> Result<(u32, u32)> {
    const LADDER: [(u32, u32); 5] = [(1, 2), (2, 2), (2, 3), (3, 3), (3, 4)];
    let overhead = cfg.qn_bits as usize;
    if bits <= overhead || (bits - overhead) % cfg.port_count != 0 {
        return Err(Error::Config(format!(
            "budget {bits} does not decompose as qn_bits + port_count*(qa+qp) \
             with qn_bits={overhead}, port_count={}",
            cfg.port_count
        )));
    }
    let sum = (bits - overhead) / cfg.port_count;
    LADDER
        .iter()
        .find(|(a, p)| (a + p) as usize == sum)
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "no (qa,qp) ladder entry with qa+qp = {sum} for budget {bits}"
            ))
        })
}

fn point_config(cfg: &ExperimentConfig, axis: &str, value: &str) -> Result<ExperimentConfig> {
    let mut point = cfg.clone();
    match axis {
        "B" => {
            let bits: usize = value
                .parse()
                .map_err(|_| Error::Config(format!("axis B value `{value}` is not an integer")))?;
            let (qa, qp) = quant_bits_for_budget(cfg, bits)?;
            point.qa_bits = qa;
            point.qp_bits = qp;
        }
        "Np" => {
            point.port_count = value
                .parse()
                .map_err(|_| Error::Config(format!("axis Np value `{value}` is not an integer")))?;
        }
        "NR" => {
            point.rb_per_subband = value
                .parse()
                .map_err(|_| Error::Config(format!("axis NR value `{value}` is not an integer")))?;
        }
        "sorting" => point.sorting = value.to_string(),
        "loss" => point.loss_mode = value.to_string(),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected B, Np, NR, sorting or loss)"
            )))
        }
    }
    point.validate()?;
    Ok(point)
}

fn axis_schemes(axis: &str) -> Vec<&'static str> {
    match axis {
        "B" | "Np" => vec!["perfect-csi", "typeii-codebook", "csinet", "csinet-nofill"],
        _ => vec!["perfect-csi", "typeii-codebook", "csinet"],
    }
}

/// Trains (when needed) and evaluates every scheme at one sweep point.
fn run_point(
    cfg: &ExperimentConfig,
    axis: &str,
    value: &str,
    out_dir: &Path,
) -> Result<Vec<ResultRow>> {
    let point = point_config(cfg, axis, value)?;
    // Points sharing a channel geometry share train/eval scene seeds,
    // so comparisons along B/Np/sorting/loss axes are paired.
    let train_seed = derive_seed(point.seed, "sweep-train", &[point.rb_per_subband as u64]);
    let eval_seed = derive_seed(point.seed, "sweep-eval", &[point.rb_per_subband as u64]);
    let train_raw = generate_scenes(&point, point.train_scenes, train_seed);
    let eval_raw = generate_scenes(&point, point.eval_scenes, eval_seed);

    let pair = DftPair::new(point.n_t(), point.subbands)?;
    let prepared = prepare_scenes(&train_raw, &pair, point.port_count, point.sort_method()?)?;
    let split = prepared.len() - point.val_scenes.min(prepared.len() - 1);
    let (train_set, val_set) = prepared.split_at(split);

    let ctx = EvalContext {
        pair: &pair,
        n_p: point.port_count,
        sorting: point.sort_method()?,
        quant: point.quant_config(),
        budget: point.link_budget(),
    };
    let mut rows = Vec::new();
    for scheme_name in axis_schemes(axis) {
        let report = match scheme_name {
            "perfect-csi" => evaluate_scheme(&Scheme::PerfectCsi, &eval_raw, &ctx)?,
            "typeii-codebook" => evaluate_scheme(&Scheme::TypeiiCodebook, &eval_raw, &ctx)?,
            learned => {
                let ablation = learned == "csinet-nofill";
                let mut model_cfg = point.model_config();
                model_cfg.ablation_no_fill = ablation;
                let mut model = CsiNet::new(
                    model_cfg,
                    derive_seed(point.seed, "model-init", &[u64::from(ablation)]),
                )?;
                let metrics = train(
                    &mut model,
                    train_set,
                    val_set,
                    &point.link_budget(),
                    &pair,
                    &point.train_config(),
                )?;
                let stem = format!("sweep_{axis}_{value}_{learned}");
                let ckpt = out_dir.join(format!("{stem}.csiw"));
                save_checkpoint(&ckpt, &model)?;
                write_metrics_csv(&out_dir.join(format!("{stem}.metrics.csv")), &metrics)?;
                evaluate_scheme(&Scheme::Learned(&model), &eval_raw, &ctx)?
            }
        };
        let mut row =
            ResultRow::from_report(&report, point.port_count, point.rb_per_subband, &point.sorting);
        if axis == "loss" {
            row.scheme = format!("{}:loss={}", row.scheme, value);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<(Vec<ResultRow>, String)> {
    cfg.validate()?;
    if opts.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // Validate every point before any expensive work.
    for value in &opts.values {
        point_config(cfg, &opts.axis, value)?;
    }
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let run_one = |value: &String| run_point(cfg, &opts.axis, value, &out_dir);
    let per_point: Vec<Result<Vec<ResultRow>>> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| opts.values.par_iter().map(run_one).collect())
    } else {
        opts.values.iter().map(run_one).collect()
    };
    let mut rows = Vec::new();
    for point_rows in per_point {
        rows.extend(point_rows?);
    }
    let results_csv = out_dir.join("results.csv");
    append_results_csv(&results_csv, &rows)?;
    dump_config(cfg, &results_csv)?;
    let table = summary_table(&rows);
    std::fs::write(
        out_dir.join(format!("sweep_{}_summary.txt", opts.axis)),
        &table,
    )?;
    Ok((rows, table))
}
