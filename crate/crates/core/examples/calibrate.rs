//! Calibration sweep for CI-scale trend tests: finds training settings
//! where the learned schemes separate cleanly from the codebook on two
//! cores in minutes. Not part of the test suite.

use csilab::angular::DftPair;
use csilab::channelgen::generate_scene;
use csilab::csinet::CsiNet;
use csilab::harness::config::ExperimentConfig;
use csilab::mueval::{evaluate_scheme, EvalContext, Scheme};
use csilab::rng::derive_seed;
use csilab::training::{prepare_scenes, train, LossMode, TrainConfig};
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let epochs: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(12);
    let scenes: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(48);
    let subbands: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(8);
    let n_p: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(16);
    let microbatch: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(32);

    let mut cfg = ExperimentConfig {
        horizontal_antennas: 2,
        vertical_antennas: 2,
        subbands,
        port_count: n_p,
        train_scenes: scenes,
        val_scenes: 8,
        eval_scenes: 96,
        epochs,
        stage1_epochs: epochs / 2,
        learning_rate: lr,
        microbatch,
        ..ExperimentConfig::default()
    };
    cfg.validate().unwrap();
    println!(
        "lr={lr} epochs={epochs} scenes={scenes} M={subbands} Np={n_p} B={} latent={} micro={microbatch}",
        cfg.feedback_bits(),
        cfg.feedback_bits() / 2
    );

    let scene_cfg = cfg.scene_config();
    let pair = DftPair::new(cfg.n_t(), cfg.subbands).unwrap();
    let train_raw: Vec<_> = (0..scenes as u64).map(|i| generate_scene(&scene_cfg, i)).collect();
    let mut eval_cfg = scene_cfg.clone();
    eval_cfg.seed = derive_seed(cfg.seed, "eval", &[]);
    let eval_raw: Vec<_> = (0..cfg.eval_scenes as u64)
        .map(|i| generate_scene(&eval_cfg, i))
        .collect();

    let prepared = prepare_scenes(&train_raw, &pair, cfg.port_count, cfg.sort_method().unwrap()).unwrap();
    let (train_set, val_set) = prepared.split_at(prepared.len() - cfg.val_scenes);

    let ctx = EvalContext {
        pair: &pair,
        n_p: cfg.port_count,
        sorting: cfg.sort_method().unwrap(),
        quant: cfg.quant_config(),
        budget: cfg.link_budget(),
    };
    let perfect = evaluate_scheme(&Scheme::PerfectCsi, &eval_raw, &ctx).unwrap();
    let codebook = evaluate_scheme(&Scheme::TypeiiCodebook, &eval_raw, &ctx).unwrap();
    println!("perfect {:.3}  codebook {:.3}", perfect.mean, codebook.mean);

    for ablation in [false, true] {
        let t0 = Instant::now();
        let mut model_cfg = cfg.model_config();
        model_cfg.ablation_no_fill = ablation;
        let mut model = CsiNet::new(model_cfg, 3).unwrap();
        let tc = TrainConfig {
            loss: LossMode::TwoStage,
            ..cfg.train_config()
        };
        let metrics = train(&mut model, train_set, val_set, &cfg.link_budget(), &pair, &tc).unwrap();
        let report = evaluate_scheme(&Scheme::Learned(&model), &eval_raw, &ctx).unwrap();
        let mse_series: Vec<String> = metrics
            .iter()
            .step_by((epochs / 6).max(1))
            .map(|m| format!("{:.1}", m.loss_mse))
            .collect();
        println!(
            "{}: rate {:.3} (stderr {:.3})  val-mse [{}]  {:.0}s",
            if ablation { "nofill" } else { "csinet" },
            report.mean,
            report.stderr,
            mse_series.join(" "),
            t0.elapsed().as_secs_f64()
        );
    }
}
