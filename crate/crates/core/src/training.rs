//! Loss functions and the two-stage training loop.
//!
//! Stage one drives reconstruction with per-UE MSE; stage two adds the
//! negative-average-rate term, which differentiates through the
//! regularized ZF pseudo-inverse and the SINR sum so multi-user
//! interference shapes the encoder. Scenes are the batching unit
//! whenever the rate term is active (its UEs must be co-scheduled);
//! per-UE losses flatten scenes into samples.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::time::Instant;


use crate::angular::DftPair;
use crate::channelgen::ChannelScene;
use crate::cmat::CMat;
use crate::csinet::{grid_to_cmat, CsiNet};
use crate::error::{Error, Result};
use crate::mueval::{sum_rate, zf_precoder, LinkBudget, ZF_LAMBDA};
use crate::rng::{derive_seed, substream};
use crate::tensorkit::{adam_step, AdamState, Mode, Tape, Tensor, ValueId};
use crate::typeii::{gather_coefficients, select_ports, sort_ports, SortMethod};
use crate::mueval::sorting_for_ue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Mse,
    Ncs,
    Nar,
    Mix,
    TwoStage,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "ncs" => Ok(LossMode::Ncs),
            "nar" => Ok(LossMode::Nar),
            "mix" => Ok(LossMode::Mix),
            "two-stage" => Ok(LossMode::TwoStage),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected mse, ncs, nar, mix or two-stage)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::Ncs => "ncs",
            LossMode::Nar => "nar",
            LossMode::Mix => "mix",
            LossMode::TwoStage => "two-stage",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    /// UE samples per forward pass; bounds tape memory. Batch
    /// normalization statistics are computed per forward pass.
    pub microbatch: usize,
    pub lr: f64,
    pub mu: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            stage1_epochs: 80,
            batch_size: 32,
            microbatch: 8,
            lr: 3e-2,
            mu: 1e-3,
            seed: 1,
            loss: LossMode::TwoStage,
            lr_decay_every: 50,
            lr_decay_factor: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.microbatch == 0 {
            return Err(Error::Config(
                "epochs, batch_size and microbatch must be >= 1".into(),
            ));
        }
        if self.stage1_epochs > self.epochs {
            return Err(Error::Config(format!(
                "stage1_epochs ({}) must not exceed epochs ({})",
                self.stage1_epochs, self.epochs
            )));
        }
        if self.mu < 0.0 {
            return Err(Error::Config("mu must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the per-epoch metrics series; losses and rate are
/// measured on the validation split.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: usize,
    pub loss_mse: f64,
    pub loss_nar: f64,
    pub val_sum_rate: f64,
    pub seconds: f64,
}

/// One UE ready for training: normalized encoder input, its ports, the
/// normalized angular-delay target grid, and the true channel for rate
/// evaluation.
#[derive(Debug, Clone)]
pub struct PreparedUe {
    pub input: Vec<f64>,
    pub ports: Vec<(usize, usize)>,
    pub target: Vec<f64>,
    pub h_dl: CMat,
}

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub ues: Vec<PreparedUe>,
}

/// Runs the BS-side pre-processing for every UE of every scene:
/// UL transform, port selection, sorting, DL gather, normalization.
pub fn prepare_scenes(
    scenes: &[ChannelScene],
    pair: &DftPair,
    n_p: usize,
    sorting: SortMethod,
) -> Result<Vec<PreparedScene>> {
    let n_t = pair.f_a().rows();
    let m = pair.f_d().rows();
    scenes
        .iter()
        .enumerate()
        .map(|(scene_idx, scene)| {
            let ues = scene
                .ues
                .iter()
                .enumerate()
                .map(|(ue_idx, ue)| {
                    let h_ul_ad = pair.to_angular_delay(&ue.h_ul)?;
                    let sel = select_ports(&h_ul_ad, n_p)?;
                    let sel = sort_ports(
                        &sel,
                        sorting_for_ue(sorting, scene_idx as u64, ue_idx as u64),
                    );
                    let h_dl_ad = pair.to_angular_delay(&ue.h_dl)?;
                    let w = gather_coefficients(&h_dl_ad, &sel)?;
                    let (input, scale) = CsiNet::encoder_input(&w);
                    let mut target = Vec::with_capacity(2 * n_t * m);
                    target.extend(h_dl_ad.data().iter().map(|z| z.re / scale));
                    target.extend(h_dl_ad.data().iter().map(|z| z.im / scale));
                    Ok(PreparedUe {
                        input,
                        ports: sel.ports,
                        target,
                        h_dl: ue.h_dl.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedScene { ues })
        })
        .collect()
}

fn cmat_parts(m: &CMat) -> (Vec<f64>, Vec<f64>) {
    (
        m.data().iter().map(|z| z.re).collect(),
        m.data().iter().map(|z| z.im).collect(),
    )
}

/// Sum over the batch of squared Frobenius reconstruction errors,
/// divided by the batch size.
pub fn loss_mse(tape: &mut Tape, outputs: ValueId, targets: &[f64]) -> Result<ValueId> {
    let shape = tape.value(outputs).shape().to_vec();
    let batch = shape[0];
    let t = tape.constant(Tensor::from_vec(&shape, targets.to_vec())?);
    let d = tape.sub(outputs, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / batch as f64))
}

/// Negative mean absolute cosine similarity between reconstructions
/// and targets; zero-norm reconstructions contribute zero.
pub fn loss_ncs(tape: &mut Tape, outputs: ValueId, targets: &[f64]) -> Result<ValueId> {
    let shape = tape.value(outputs).shape().to_vec();
    let (batch, n_t, m) = (shape[0], shape[2], shape[3]);
    let plane = n_t * m;
    let mut acc: Option<ValueId> = None;
    for k in 0..batch {
        let base = k * 2 * plane;
        let t_re = &targets[base..base + plane];
        let t_im = &targets[base + plane..base + 2 * plane];
        let t_norm = (t_re.iter().map(|v| v * v).sum::<f64>()
            + t_im.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        let o_re = tape.plane(outputs, k, 0)?;
        let o_im = tape.plane(outputs, k, 1)?;
        let o_norm_val = {
            let re = tape.value(o_re).data();
            let im = tape.value(o_im).data();
            (re.iter().map(|v| v * v).sum::<f64>() + im.iter().map(|v| v * v).sum::<f64>()).sqrt()
        };
        if t_norm < 1e-30 || o_norm_val < 1e-30 {
            continue;
        }
        let tr = tape.constant(Tensor::from_vec(&[n_t, m], t_re.to_vec())?);
        let ti = tape.constant(Tensor::from_vec(&[n_t, m], t_im.to_vec())?);
        // complex inner product <T, O> = sum conj(T) .* O
        let rr = tape.mul(tr, o_re)?;
        let ii = tape.mul(ti, o_im)?;
        let ri = tape.mul(tr, o_im)?;
        let ir = tape.mul(ti, o_re)?;
        let re_sum0 = tape.add(rr, ii)?;
        let re_sum = tape.sum_all(re_sum0);
        let im_sum0 = tape.sub(ri, ir)?;
        let im_sum = tape.sum_all(im_sum0);
        let re2 = tape.mul(re_sum, re_sum)?;
        let im2 = tape.mul(im_sum, im_sum)?;
        let mag2 = tape.add(re2, im2)?;
        let mag = tape.sqrt(mag2);
        // |O| on the tape so its gradient is part of the objective
        let ore2 = tape.mul(o_re, o_re)?;
        let oim2 = tape.mul(o_im, o_im)?;
        let osum0 = tape.add(ore2, oim2)?;
        let osum = tape.sum_all(osum0);
        let onorm = tape.sqrt(osum);
        let denom = tape.scale(onorm, t_norm);
        let term = tape.div(mag, denom)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, -1.0 / batch as f64))
}

/// Differentiable negative average rate: ZF precoders from the
/// reconstructions (inverse-transformed to spatial-frequency), SINRs
/// against the true channels, `-R_SUM / K`.
pub fn loss_nar(
    tape: &mut Tape,
    outputs: ValueId,
    h_true: &[CMat],
    budget: &LinkBudget,
    pair: &DftPair,
) -> Result<ValueId> {
    let shape = tape.value(outputs).shape().to_vec();
    let k_count = shape[0];
    let (n_t, m_count) = (shape[2], shape[3]);
    if h_true.len() != k_count {
        return Err(Error::Shape {
            op: "loss_nar ue count",
            left: vec![h_true.len()],
            right: vec![k_count],
        });
    }
    // Transform constants.
    let (far, fai) = cmat_parts(pair.f_a());
    let (fdhr, fdhi) = cmat_parts(&pair.f_d().hermitian());
    let far_c = tape.constant(Tensor::from_vec(&[n_t, n_t], far)?);
    let fai_c = tape.constant(Tensor::from_vec(&[n_t, n_t], fai)?);
    let fdhr_c = tape.constant(Tensor::from_vec(&[m_count, m_count], fdhr)?);
    let fdhi_c = tape.constant(Tensor::from_vec(&[m_count, m_count], fdhi)?);

    // Inverse transform per UE: H = F_A X F_Dᴴ on (re, im) planes.
    let mut hr_ids = Vec::with_capacity(k_count);
    let mut hi_ids = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let xr = tape.plane(outputs, k, 0)?;
        let xi = tape.plane(outputs, k, 1)?;
        let ar_xr = tape.matmul(far_c, xr)?;
        let ai_xi = tape.matmul(fai_c, xi)?;
        let axr = tape.sub(ar_xr, ai_xi)?;
        let ar_xi = tape.matmul(far_c, xi)?;
        let ai_xr = tape.matmul(fai_c, xr)?;
        let axi = tape.add(ar_xi, ai_xr)?;
        let hr0 = tape.matmul(axr, fdhr_c)?;
        let hr1 = tape.matmul(axi, fdhi_c)?;
        let hr = tape.sub(hr0, hr1)?;
        let hi0 = tape.matmul(axr, fdhi_c)?;
        let hi1 = tape.matmul(axi, fdhr_c)?;
        let hi = tape.add(hi0, hi1)?;
        hr_ids.push(hr);
        hi_ids.push(hi);
    }

    let eye_k = {
        let mut d = vec![0.0; k_count * k_count];
        for i in 0..k_count {
            d[i * k_count + i] = 1.0;
        }
        tape.constant(Tensor::from_vec(&[k_count, k_count], d)?)
    };
    let ones_k1 = tape.constant(Tensor::full(&[k_count, 1], 1.0));
    let ones_1k = tape.constant(Tensor::full(&[1, k_count], 1.0));
    let ones_1nt = tape.constant(Tensor::full(&[1, n_t], 1.0));
    let ones_nt1 = tape.constant(Tensor::full(&[n_t, 1], 1.0));

    let mut rate_sum: Option<ValueId> = None;
    for m in 0..m_count {
        // Stack per-UE columns of subband m.
        let mut r_cols = Vec::with_capacity(k_count);
        let mut i_cols = Vec::with_capacity(k_count);
        for k in 0..k_count {
            r_cols.push(tape.slice2d(hr_ids[k], 0, n_t, m, 1)?);
            i_cols.push(tape.slice2d(hi_ids[k], 0, n_t, m, 1)?);
        }
        let hm_r = tape.concat_cols(&r_cols)?;
        let hm_i = tape.concat_cols(&i_cols)?;
        // Gram = HᴴH.
        let hr_t = tape.transpose2(hm_r)?;
        let hi_t = tape.transpose2(hm_i)?;
        let g_rr = tape.matmul(hr_t, hm_r)?;
        let g_ii = tape.matmul(hi_t, hm_i)?;
        let g_re = tape.add(g_rr, g_ii)?;
        let g_ri = tape.matmul(hr_t, hm_i)?;
        let g_ir = tape.matmul(hi_t, hm_r)?;
        let g_im = tape.sub(g_ri, g_ir)?;
        // Tikhonov shift from the trace.
        let diag = tape.mul(g_re, eye_k)?;
        let tr0 = tape.sum_all(diag);
        let tr = tape.reshape(tr0, &[1, 1])?;
        let lam = tape.scale(tr, ZF_LAMBDA / k_count as f64);
        let lam_col = tape.matmul(ones_k1, lam)?;
        let lam_mat = tape.matmul(lam_col, ones_1k)?;
        let lam_diag = tape.mul(lam_mat, eye_k)?;
        let g_re_reg = tape.add(g_re, lam_diag)?;
        // Real 2Kx2K embedding of the complex Gram, inverted.
        let neg_gi = tape.neg(g_im);
        let top = tape.concat_cols(&[g_re_reg, neg_gi])?;
        let bot = tape.concat_cols(&[g_im, g_re_reg])?;
        let emb = tape.concat_rows(&[top, bot])?;
        let inv = tape.mat_inverse(emb)?;
        let y_re = tape.slice2d(inv, 0, k_count, 0, k_count)?;
        let y_im = tape.slice2d(inv, k_count, k_count, 0, k_count)?;
        // Raw precoders V = H Y, then column normalization.
        let v_rr = tape.matmul(hm_r, y_re)?;
        let v_ii = tape.matmul(hm_i, y_im)?;
        let v_re = tape.sub(v_rr, v_ii)?;
        let v_ri = tape.matmul(hm_r, y_im)?;
        let v_ir = tape.matmul(hm_i, y_re)?;
        let v_im = tape.add(v_ri, v_ir)?;
        let vr2 = tape.mul(v_re, v_re)?;
        let vi2 = tape.mul(v_im, v_im)?;
        let vsq = tape.add(vr2, vi2)?;
        let nsq = tape.matmul(ones_1nt, vsq)?;
        let norms = tape.sqrt(nsq);
        let nb = tape.matmul(ones_nt1, norms)?;
        let vn_re = tape.div(v_re, nb)?;
        let vn_im = tape.div(v_im, nb)?;
        // Per-UE SINR against the true channel.
        for (k, h) in h_true.iter().enumerate() {
            let col = h.col(m);
            let hr_row: Vec<f64> = col.iter().map(|z| z.re).collect();
            let hi_row: Vec<f64> = col.iter().map(|z| z.im).collect();
            let hr_c = tape.constant(Tensor::from_vec(&[1, n_t], hr_row)?);
            let hi_c = tape.constant(Tensor::from_vec(&[1, n_t], hi_row)?);
            // z = hᴴ v: re = hrᵀVr + hiᵀVi, im = hrᵀVi - hiᵀVr
            let zr0 = tape.matmul(hr_c, vn_re)?;
            let zr1 = tape.matmul(hi_c, vn_im)?;
            let zr = tape.add(zr0, zr1)?;
            let zi0 = tape.matmul(hr_c, vn_im)?;
            let zi1 = tape.matmul(hi_c, vn_re)?;
            let zi = tape.sub(zi0, zi1)?;
            let zr2 = tape.mul(zr, zr)?;
            let zi2 = tape.mul(zi, zi)?;
            let p2 = tape.add(zr2, zi2)?;
            let mut mask = vec![0.0; k_count];
            mask[k] = 1.0;
            let mask_c = tape.constant(Tensor::from_vec(&[1, k_count], mask)?);
            let sig0 = tape.mul(p2, mask_c)?;
            let sig = tape.sum_all(sig0);
            let tot = tape.sum_all(p2);
            let intf = tape.sub(tot, sig)?;
            let num = tape.scale(sig, budget.p_per_ue_w);
            let den0 = tape.scale(intf, budget.p_per_ue_w);
            let den = tape.add_scalar(den0, budget.noise_w);
            let sinr = tape.div(num, den)?;
            let one_plus = tape.add_scalar(sinr, 1.0);
            let ln_v = tape.ln(one_plus);
            let rate = tape.scale(ln_v, 1.0 / LN_2);
            rate_sum = Some(match rate_sum {
                None => rate,
                Some(a) => tape.add(a, rate)?,
            });
        }
    }
    let total = rate_sum.expect("at least one subband and UE");
    let r = tape.scale(total, 1.0 / m_count as f64);
    Ok(tape.scale(r, -1.0 / k_count as f64))
}

/// `L_MSE + mu * L_NAR` from already-built terms.
pub fn loss_mix(tape: &mut Tape, mse: ValueId, nar: ValueId, mu: f64) -> Result<ValueId> {
    let scaled = tape.scale(nar, mu);
    tape.add(mse, scaled)
}

/// Loss actually applied at a given epoch (1-based).
pub fn effective_loss(cfg: &TrainConfig, epoch: usize) -> LossMode {
    match cfg.loss {
        LossMode::TwoStage => {
            if epoch <= cfg.stage1_epochs {
                LossMode::Mse
            } else {
                LossMode::Mix
            }
        }
        other => other,
    }
}

/// Stage label for the metrics series: 2 whenever the rate term is
/// active.
pub fn stage_of(cfg: &TrainConfig, epoch: usize) -> usize {
    match effective_loss(cfg, epoch) {
        LossMode::Mse | LossMode::Ncs => 1,
        _ => 2,
    }
}

fn accumulate_param_grads(
    model: &mut CsiNet,
    tape: &Tape,
    ids: &BTreeMap<String, ValueId>,
) {
    for (name, id) in ids {
        if let Some(g) = tape.grad(*id) {
            let g = g.to_vec();
            let p = model.params.get_mut(name);
            if p.requires_grad {
                p.accumulate_grad(&g);
            }
        }
    }
}

fn ensure_all_grads(model: &mut CsiNet) {
    // Parameters untouched by a batch (e.g. conv stack in the ablation)
    // still need a defined gradient for the optimizer contract.
    let zero_names: Vec<(String, usize)> = model
        .params
        .iter()
        .filter(|(_, t)| t.requires_grad && t.grad.is_none())
        .map(|(n, t)| (n.clone(), t.numel()))
        .collect();
    for (name, n) in zero_names {
        model.params.get_mut(&name).accumulate_grad(&vec![0.0; n]);
    }
}

/// Validation metrics: mean per-scene MSE/NAR losses and mean sum rate.
pub fn validation_metrics(
    model: &CsiNet,
    val: &[PreparedScene],
    budget: &LinkBudget,
    pair: &DftPair,
) -> Result<(f64, f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let mut mse_sum = 0.0;
    let mut rate_sum = 0.0;
    let n_t = pair.f_a().rows();
    let m_count = pair.f_d().rows();
    for scene in val {
        let ws_ports: Vec<Vec<(usize, usize)>> =
            scene.ues.iter().map(|ue| ue.ports.clone()).collect();
        let inputs: Vec<f64> = scene.ues.iter().flat_map(|ue| ue.input.clone()).collect();
        let k = scene.ues.len();
        let mut tape = Tape::new();
        let ids = model.register(&mut tape);
        let x = tape.constant(Tensor::from_vec(&[k, 2 * model.cfg.n_p], inputs)?);
        let mut sink = Vec::new();
        let out = model.forward_tape(&mut tape, &ids, x, &ws_ports, Mode::Eval, 0, &mut sink)?;
        let data = tape.value(out.recon).data();
        let mut scene_mse = 0.0;
        let mut recon_sf = Vec::with_capacity(k);
        for (ki, ue) in scene.ues.iter().enumerate() {
            let plane = 2 * n_t * m_count;
            let got = &data[ki * plane..(ki + 1) * plane];
            scene_mse += got
                .iter()
                .zip(&ue.target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            let ad = grid_to_cmat(data, ki, n_t, m_count)?;
            recon_sf.push(pair.from_angular_delay(&ad)?);
        }
        mse_sum += scene_mse / k as f64;
        let mut precoders = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut h_hat = CMat::zeros(n_t, k);
            for (ki, r) in recon_sf.iter().enumerate() {
                h_hat.set_col(ki, &r.col(m));
            }
            precoders.push(zf_precoder(&h_hat)?);
        }
        let h_true: Vec<CMat> = scene.ues.iter().map(|ue| ue.h_dl.clone()).collect();
        rate_sum += sum_rate(&h_true, &precoders, budget);
    }
    let n = val.len() as f64;
    let k_mean = val[0].ues.len() as f64;
    let mean_rate = rate_sum / n;
    Ok((mse_sum / n, -mean_rate / k_mean, mean_rate))
}

/// Trains the model in place, returning one metrics record per epoch.
pub fn train(
    model: &mut CsiNet,
    train_scenes: &[PreparedScene],
    val_scenes: &[PreparedScene],
    budget: &LinkBudget,
    pair: &DftPair,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut state = AdamState::new(cfg.lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        if cfg.lr_decay_every > 0 {
            let decays = (epoch - 1) / cfg.lr_decay_every;
            state.lr = cfg.lr * cfg.lr_decay_factor.powi(decays as i32);
        }
        let loss = effective_loss(cfg, epoch);
        match loss {
            LossMode::Mse | LossMode::Ncs => {
                train_epoch_per_ue(model, train_scenes, cfg, loss, epoch, &mut state)?
            }
            LossMode::Nar | LossMode::Mix => {
                train_epoch_per_scene(model, train_scenes, budget, pair, cfg, loss, epoch, &mut state)?
            }
            LossMode::TwoStage => unreachable!("resolved by effective_loss"),
        }
        let (loss_mse_v, loss_nar_v, val_rate) =
            validation_metrics(model, val_scenes, budget, pair)?;
        metrics.push(MetricsRecord {
            epoch,
            stage: stage_of(cfg, epoch),
            loss_mse: loss_mse_v,
            loss_nar: loss_nar_v,
            val_sum_rate: val_rate,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut rng = substream(seed, "shuffle", &[]);
    let mut v: Vec<T> = items.to_vec();
    v.shuffle(&mut rng);
    v
}

#[allow(clippy::too_many_arguments)]
fn train_epoch_per_ue(
    model: &mut CsiNet,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    loss: LossMode,
    epoch: usize,
    state: &mut AdamState,
) -> Result<()> {
    let all: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| (0..scene.ues.len()).map(move |u| (s, u)))
        .collect();
    let order = shuffled(&all, derive_seed(cfg.seed, "epoch-ue", &[epoch as u64]));
    for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
        for (micro_idx, micro) in batch.chunks(cfg.microbatch).enumerate() {
            let ues: Vec<&PreparedUe> = micro.iter().map(|&(s, u)| &scenes[s].ues[u]).collect();
            let inputs: Vec<f64> = ues.iter().flat_map(|ue| ue.input.clone()).collect();
            let targets: Vec<f64> = ues.iter().flat_map(|ue| ue.target.clone()).collect();
            let ports: Vec<Vec<(usize, usize)>> = ues.iter().map(|ue| ue.ports.clone()).collect();
            let mut tape = Tape::new();
            let ids = model.register(&mut tape);
            let x = tape.constant(Tensor::from_vec(&[ues.len(), 2 * model.cfg.n_p], inputs)?);
            let mut bn_updates = Vec::new();
            let dropout_seed = derive_seed(
                cfg.seed,
                "dropout",
                &[epoch as u64, step as u64, micro_idx as u64],
            );
            let out = model.forward_tape(
                &mut tape,
                &ids,
                x,
                &ports,
                Mode::Train,
                dropout_seed,
                &mut bn_updates,
            )?;
            // Per-UE loss summed over the microbatch, scaled by the
            // optimizer batch size.
            let term = match loss {
                LossMode::Mse => loss_mse(&mut tape, out.recon, &targets)?,
                LossMode::Ncs => loss_ncs(&mut tape, out.recon, &targets)?,
                _ => unreachable!(),
            };
            // loss_* divide by the microbatch length; rescale to the
            // batch denominator.
            let objective = tape.scale(term, ues.len() as f64 / batch.len() as f64);
            check_finite(&tape, objective, epoch, step)?;
            tape.backward(objective)?;
            accumulate_param_grads(model, &tape, &ids);
            model.apply_bn_updates(&bn_updates);
        }
        ensure_all_grads(model);
        adam_step(&mut model.params, state)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_epoch_per_scene(
    model: &mut CsiNet,
    scenes: &[PreparedScene],
    budget: &LinkBudget,
    pair: &DftPair,
    cfg: &TrainConfig,
    loss: LossMode,
    epoch: usize,
    state: &mut AdamState,
) -> Result<()> {
    let idx: Vec<usize> = (0..scenes.len()).collect();
    let order = shuffled(&idx, derive_seed(cfg.seed, "epoch-scene", &[epoch as u64]));
    for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
        for (micro_idx, &scene_idx) in batch.iter().enumerate() {
            let scene = &scenes[scene_idx];
            let k = scene.ues.len();
            let inputs: Vec<f64> = scene.ues.iter().flat_map(|ue| ue.input.clone()).collect();
            let targets: Vec<f64> = scene.ues.iter().flat_map(|ue| ue.target.clone()).collect();
            let ports: Vec<Vec<(usize, usize)>> =
                scene.ues.iter().map(|ue| ue.ports.clone()).collect();
            let h_true: Vec<CMat> = scene.ues.iter().map(|ue| ue.h_dl.clone()).collect();
            let mut tape = Tape::new();
            let ids = model.register(&mut tape);
            let x = tape.constant(Tensor::from_vec(&[k, 2 * model.cfg.n_p], inputs)?);
            let mut bn_updates = Vec::new();
            let dropout_seed = derive_seed(
                cfg.seed,
                "dropout",
                &[epoch as u64, step as u64, micro_idx as u64],
            );
            let out = model.forward_tape(
                &mut tape,
                &ids,
                x,
                &ports,
                Mode::Train,
                dropout_seed,
                &mut bn_updates,
            )?;
            let nar = loss_nar(&mut tape, out.recon, &h_true, budget, pair)?;
            let scene_loss = match loss {
                LossMode::Nar => nar,
                LossMode::Mix => {
                    let mse = loss_mse(&mut tape, out.recon, &targets)?;
                    loss_mix(&mut tape, mse, nar, cfg.mu)?
                }
                _ => unreachable!(),
            };
            let objective = tape.scale(scene_loss, 1.0 / batch.len() as f64);
            check_finite(&tape, objective, epoch, step)?;
            tape.backward(objective)?;
            accumulate_param_grads(model, &tape, &ids);
            model.apply_bn_updates(&bn_updates);
        }
        ensure_all_grads(model);
        adam_step(&mut model.params, state)?;
    }
    Ok(())
}

fn check_finite(tape: &Tape, objective: ValueId, epoch: usize, step: usize) -> Result<()> {
    let v = tape.value(objective).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!(
            "loss became non-finite ({v}) at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
