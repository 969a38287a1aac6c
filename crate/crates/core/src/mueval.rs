//! Zero-forcing precoding and sum-rate evaluation: the one yardstick
//! every feedback scheme is measured with. Rates always use the true
//! downlink channels; only the precoders come from reconstructed CSI.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::angular::DftPair;
use crate::channelgen::{ChannelScene, RB_BANDWIDTH_HZ};
use crate::cmat::CMat;
use crate::csinet::CsiNet;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::typeii::{
    dequantize_typeii, feedback_bit_length, gather_coefficients, quantize_typeii,
    reconstruct_codebook, select_ports, sort_ports, SortMethod, TypeIIQuantConfig,
};

/// Tikhonov factor for the ZF Gram inverse: lambda = ZF_LAMBDA *
/// trace(G) / K. Shared by the evaluator and the rate loss. Small
/// enough that per-UE rescaling moves the normalized precoders by well
/// under 1e-9, while still keeping exactly singular Grams invertible.
pub const ZF_LAMBDA: f64 = 1e-11;

/// Power and noise bookkeeping. `p_per_ue_w` is the per-UE, per-subband
/// transmit power; `noise_w` the per-subband noise power.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudget {
    pub p_total_dbm: f64,
    pub noise_figure_db: f64,
    pub p_per_ue_w: f64,
    pub noise_w: f64,
}

fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl LinkBudget {
    /// Splits the total budget evenly over UEs and subbands, and sets
    /// the noise floor from thermal density over one subband plus the
    /// noise figure.
    pub fn from_system(
        p_total_dbm: f64,
        noise_figure_db: f64,
        ue_count: usize,
        subbands: usize,
        rb_per_subband: usize,
    ) -> Self {
        let p_per_ue_w = dbm_to_w(p_total_dbm) / (ue_count * subbands) as f64;
        let bw = rb_per_subband as f64 * RB_BANDWIDTH_HZ;
        let noise_dbm = -174.0 + 10.0 * bw.log10() + noise_figure_db;
        LinkBudget {
            p_total_dbm,
            noise_figure_db,
            p_per_ue_w,
            noise_w: dbm_to_w(noise_dbm),
        }
    }
}

/// Regularized ZF: `V_raw = H (HᴴH + λI)⁻¹`, columns normalized to unit
/// norm. `h_hat` holds one reconstructed channel column per UE.
pub fn zf_precoder(h_hat: &CMat) -> Result<CMat> {
    let (n_t, k) = (h_hat.rows(), h_hat.cols());
    if k > n_t {
        return Err(Error::Config(format!(
            "zero-forcing needs K <= N_t, got K={k}, N_t={n_t}"
        )));
    }
    let gram = h_hat.hermitian().matmul(h_hat)?;
    let trace: f64 = (0..k).map(|i| gram[(i, i)].re).sum();
    let lambda = ZF_LAMBDA * trace / k as f64;
    let mut reg = gram;
    for i in 0..k {
        reg[(i, i)] += Complex64::new(lambda, 0.0);
    }
    let inv = reg.inverse()?;
    let mut v = h_hat.matmul(&inv)?;
    for j in 0..k {
        let norm = v.col(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..n_t {
                v[(r, j)] /= norm;
            }
        }
    }
    Ok(v)
}

/// Average-over-subbands sum of per-UE log2(1 + SINR).
/// `h_true[k]` is UE k's true (N_t x M) channel; `precoders[m]` the
/// (N_t x K) precoding matrix of subband m.
pub fn sum_rate(h_true: &[CMat], precoders: &[CMat], budget: &LinkBudget) -> f64 {
    let k_count = h_true.len();
    let m_count = precoders.len();
    let p = budget.p_per_ue_w;
    let mut total = 0.0;
    for (m, v) in precoders.iter().enumerate() {
        for (k, h) in h_true.iter().enumerate() {
            let h_col = h.col(m);
            let mut signal = 0.0;
            let mut interference = 0.0;
            for j in 0..k_count {
                let mut z = Complex64::ZERO;
                for r in 0..h_col.len() {
                    z += h_col[r].conj() * v[(r, j)];
                }
                if j == k {
                    signal = z.norm_sqr();
                } else {
                    interference += z.norm_sqr();
                }
            }
            let sinr = p * signal / (p * interference + budget.noise_w);
            total += (1.0 + sinr).log2();
        }
    }
    total / m_count as f64
}

/// Which feedback scheme reconstructs the downlink CSI.
pub enum Scheme<'a> {
    PerfectCsi,
    TypeiiCodebook,
    /// Learned model; the ablation flag inside the model decides
    /// whether position filling plus conv refinement runs.
    Learned(&'a CsiNet),
}

impl Scheme<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::PerfectCsi => "perfect-csi",
            Scheme::TypeiiCodebook => "typeii-codebook",
            Scheme::Learned(model) => {
                if model.cfg.ablation_no_fill {
                    "csinet-nofill"
                } else {
                    "csinet"
                }
            }
        }
    }
}

/// Everything the per-scene pipeline needs besides the scheme itself.
pub struct EvalContext<'a> {
    pub pair: &'a DftPair,
    pub n_p: usize,
    pub sorting: SortMethod,
    pub quant: TypeIIQuantConfig,
    pub budget: LinkBudget,
}

/// Per-scheme evaluation summary over a set of scenes.
#[derive(Debug, Clone)]
pub struct SumRateReport {
    pub scheme: String,
    pub per_scene: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub feedback_bits: usize,
}

fn summarize(scheme: &str, per_scene: Vec<f64>, feedback_bits: usize) -> SumRateReport {
    let n = per_scene.len() as f64;
    let mean = per_scene.iter().sum::<f64>() / n;
    let var = per_scene.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n.max(1.0);
    let stderr = if per_scene.len() > 1 {
        (var / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    SumRateReport {
        scheme: scheme.to_string(),
        per_scene,
        mean,
        stderr,
        feedback_bits,
    }
}

/// Resolves the per-UE sorting method: the random baseline re-seeds per
/// (scene, UE) so each sample sees an independent shuffle.
pub fn sorting_for_ue(method: SortMethod, scene_index: u64, ue_index: u64) -> SortMethod {
    match method {
        SortMethod::Random(base) => {
            SortMethod::Random(derive_seed(base, "ue-sort", &[scene_index, ue_index]))
        }
        other => other,
    }
}

/// Reconstructs every UE of one scene under the scheme and returns the
/// scene's sum rate with true-channel ZF evaluation.
pub fn scene_rate(
    scheme: &Scheme,
    scene: &ChannelScene,
    scene_index: u64,
    ctx: &EvalContext,
) -> Result<f64> {
    let k_count = scene.ues.len();
    let m_count = ctx.pair.f_d().rows();
    let n_t = ctx.pair.f_a().rows();

    // Reconstructed spatial-frequency channels, one per UE.
    let recon: Vec<CMat> = match scheme {
        Scheme::PerfectCsi => scene.ues.iter().map(|ue| ue.h_dl.clone()).collect(),
        Scheme::TypeiiCodebook => {
            let mut out = Vec::with_capacity(k_count);
            for (ue_idx, ue) in scene.ues.iter().enumerate() {
                let h_ul_ad = ctx.pair.to_angular_delay(&ue.h_ul)?;
                let sel = select_ports(&h_ul_ad, ctx.n_p)?;
                let sel = sort_ports(
                    &sel,
                    sorting_for_ue(ctx.sorting, scene_index, ue_idx as u64),
                );
                let h_dl_ad = ctx.pair.to_angular_delay(&ue.h_dl)?;
                let w = gather_coefficients(&h_dl_ad, &sel)?;
                let payload = quantize_typeii(&w, &sel, &ctx.quant, n_t)?;
                let w_hat = dequantize_typeii(&payload, &sel, n_t)?;
                let ad = reconstruct_codebook(&w_hat, &sel, n_t, m_count)?;
                out.push(ctx.pair.from_angular_delay(&ad)?);
            }
            out
        }
        Scheme::Learned(model) => {
            let mut ws = Vec::with_capacity(k_count);
            let mut sels = Vec::with_capacity(k_count);
            for (ue_idx, ue) in scene.ues.iter().enumerate() {
                let h_ul_ad = ctx.pair.to_angular_delay(&ue.h_ul)?;
                let sel = select_ports(&h_ul_ad, ctx.n_p)?;
                let sel = sort_ports(
                    &sel,
                    sorting_for_ue(ctx.sorting, scene_index, ue_idx as u64),
                );
                let h_dl_ad = ctx.pair.to_angular_delay(&ue.h_dl)?;
                ws.push(gather_coefficients(&h_dl_ad, &sel)?);
                sels.push(sel);
            }
            let ads = model.forward_eval_batch(&ws, &sels)?;
            ads.iter()
                .map(|ad| ctx.pair.from_angular_delay(ad))
                .collect::<Result<Vec<_>>>()?
        }
    };

    // ZF per subband from the reconstructions, rated on true channels.
    let mut precoders = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut h_hat = CMat::zeros(n_t, k_count);
        for (k, r) in recon.iter().enumerate() {
            h_hat.set_col(k, &r.col(m));
        }
        precoders.push(zf_precoder(&h_hat)?);
    }
    let h_true: Vec<CMat> = scene.ues.iter().map(|ue| ue.h_dl.clone()).collect();
    Ok(sum_rate(&h_true, &precoders, &ctx.budget))
}

/// Scheme-level feedback payload size in bits per UE.
pub fn scheme_feedback_bits(scheme: &Scheme, ctx: &EvalContext) -> usize {
    match scheme {
        Scheme::PerfectCsi => 0,
        Scheme::TypeiiCodebook => feedback_bit_length(&ctx.quant, ctx.n_p),
        Scheme::Learned(model) => model.cfg.latent_bits(),
    }
}

/// Evaluates a scheme over all scenes (in parallel, deterministic
/// aggregation order) and aggregates a report.
pub fn evaluate_scheme(
    scheme: &Scheme,
    scenes: &[ChannelScene],
    ctx: &EvalContext,
) -> Result<SumRateReport> {
    let per_scene: Result<Vec<f64>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| scene_rate(scheme, scene, i as u64, ctx))
        .collect();
    Ok(summarize(
        scheme.name(),
        per_scene?,
        scheme_feedback_bits(scheme, ctx),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cmat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMat {
        let data = (0..rows * cols)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        CMat::from_vec(rows, cols, data).unwrap()
    }

    fn unit_budget(p_over_sigma2: f64) -> LinkBudget {
        LinkBudget {
            p_total_dbm: 0.0,
            noise_figure_db: 0.0,
            p_per_ue_w: p_over_sigma2,
            noise_w: 1.0,
        }
    }

    #[test]
    fn budget_noise_matches_definition() {
        let b = LinkBudget::from_system(35.0, 5.0, 5, 16, 4);
        let bw = 4.0 * RB_BANDWIDTH_HZ;
        let expect_noise = dbm_to_w(-174.0 + 10.0 * bw.log10() + 5.0);
        assert!((b.noise_w - expect_noise).abs() / expect_noise < 1e-12);
        let expect_p = dbm_to_w(35.0) / 80.0;
        assert!((b.p_per_ue_w - expect_p).abs() / expect_p < 1e-12);
    }

    #[test]
    fn zf_of_orthonormal_columns_is_identity() {
        // e_1, e_3 as channel columns: ZF returns them unchanged.
        let mut h = CMat::zeros(4, 2);
        h[(0, 0)] = Complex64::ONE;
        h[(2, 1)] = Complex64::ONE;
        let v = zf_precoder(&h).unwrap();
        for (r, c, expect) in [
            (0, 0, 1.0),
            (2, 1, 1.0),
            (1, 0, 0.0),
            (3, 1, 0.0),
            (0, 1, 0.0),
        ] {
            assert!((v[(r, c)] - Complex64::new(expect, 0.0)).norm() < 1e-8);
        }
    }

    #[test]
    fn zf_nulls_interference_on_full_rank_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_cmat(8, 3, &mut rng);
        let v = zf_precoder(&h).unwrap();
        for k in 0..3 {
            let hk = h.col(k);
            let norm_k = hk.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for j in 0..3 {
                if j == k {
                    continue;
                }
                let mut z = Complex64::ZERO;
                for r in 0..8 {
                    z += hk[r].conj() * v[(r, j)];
                }
                assert!(
                    z.norm() < 1e-8 * norm_k,
                    "residual interference {} for ({k},{j})",
                    z.norm()
                );
            }
            let vnorm = v.col(k).iter().map(|z| z.norm_sqr()).sum::<f64>();
            assert!((vnorm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zf_is_invariant_to_per_ue_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_cmat(8, 3, &mut rng);
        let mut h_scaled = h.clone();
        for r in 0..8 {
            h_scaled[(r, 1)] *= Complex64::new(5.0, 0.0);
        }
        let v1 = zf_precoder(&h).unwrap();
        let v2 = zf_precoder(&h_scaled).unwrap();
        for r in 0..8 {
            for c in 0..3 {
                assert!((v1[(r, c)] - v2[(r, c)]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zf_rejects_more_ues_than_antennas() {
        let h = CMat::zeros(2, 3);
        assert!(matches!(zf_precoder(&h), Err(Error::Config(_))));
    }

    #[test]
    fn single_ue_rate_closed_form() {
        let mut h = CMat::zeros(2, 1);
        h[(0, 0)] = Complex64::ONE;
        let v = zf_precoder(&h).unwrap();
        let rate = sum_rate(&[h], &[v], &unit_budget(10.0));
        assert!((rate - 11f64.log2()).abs() < 1e-6, "rate {rate}");
    }

    #[test]
    fn orthogonal_ues_rate_closed_form() {
        let mut h1 = CMat::zeros(2, 1);
        h1[(0, 0)] = Complex64::ONE;
        let mut h2 = CMat::zeros(2, 1);
        h2[(1, 0)] = Complex64::ONE;
        let mut stacked = CMat::zeros(2, 2);
        stacked.set_col(0, &h1.col(0));
        stacked.set_col(1, &h2.col(0));
        let v = zf_precoder(&stacked).unwrap();
        let rate = sum_rate(&[h1, h2], &[v], &unit_budget(1.0));
        assert!((rate - 2.0).abs() < 1e-6, "rate {rate}");
    }

    #[test]
    fn rate_matches_straight_line_reimplementation() {
        // Independent re-derivation of the SINR sum, written as plainly
        // as possible.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n_t, k_count, m_count) = (8, 3, 4);
        let h_true: Vec<CMat> = (0..k_count)
            .map(|_| random_cmat(n_t, m_count, &mut rng))
            .collect();
        let precoders: Vec<CMat> = (0..m_count)
            .map(|_| {
                let mut v = random_cmat(n_t, k_count, &mut rng);
                for j in 0..k_count {
                    let n = v.col(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    for r in 0..n_t {
                        v[(r, j)] /= n;
                    }
                }
                v
            })
            .collect();
        let budget = unit_budget(3.0);
        let got = sum_rate(&h_true, &precoders, &budget);

        let mut expect = 0.0;
        for m in 0..m_count {
            for k in 0..k_count {
                let mut sig = 0.0;
                let mut intf = 0.0;
                for j in 0..k_count {
                    let mut dot = Complex64::ZERO;
                    for r in 0..n_t {
                        dot += h_true[k][(r, m)].conj() * precoders[m][(r, j)];
                    }
                    let pw = budget.p_per_ue_w * dot.norm_sqr();
                    if j == k {
                        sig = pw;
                    } else {
                        intf += pw;
                    }
                }
                expect += (1.0 + sig / (intf + budget.noise_w)).log2();
            }
        }
        expect /= m_count as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn rate_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n_t, k_count, m_count) = (8, 3, 2);
        let h: Vec<CMat> = (0..k_count)
            .map(|_| random_cmat(n_t, m_count, &mut rng))
            .collect();
        let precoders: Vec<CMat> = (0..m_count)
            .map(|m| {
                let mut stacked = CMat::zeros(n_t, k_count);
                for (k, hk) in h.iter().enumerate() {
                    stacked.set_col(k, &hk.col(m));
                }
                zf_precoder(&stacked).unwrap()
            })
            .collect();
        let budget = unit_budget(2.0);
        let base = sum_rate(&h, &precoders, &budget);
        // Relabel UEs (2,0,1) together with the precoder columns.
        let perm = [2usize, 0, 1];
        let h_perm: Vec<CMat> = perm.iter().map(|&k| h[k].clone()).collect();
        let prec_perm: Vec<CMat> = precoders
            .iter()
            .map(|v| {
                let mut out = CMat::zeros(n_t, k_count);
                for (new_k, &old_k) in perm.iter().enumerate() {
                    out.set_col(new_k, &v.col(old_k));
                }
                out
            })
            .collect();
        let permuted = sum_rate(&h_perm, &prec_perm, &budget);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn rate_increases_with_power_without_interference() {
        let mut h = CMat::zeros(2, 1);
        h[(0, 0)] = Complex64::ONE;
        let v = zf_precoder(&h).unwrap();
        let low = sum_rate(&[h.clone()], &[v.clone()], &unit_budget(1.0));
        let high = sum_rate(&[h], &[v], &unit_budget(4.0));
        assert!(high > low);
    }
}
