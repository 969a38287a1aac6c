//! Latest-TypeII codebook path: port selection on the UL angular-delay
//! matrix, the three sorting methods (plus the random baseline),
//! polarization/amplitude/phase quantization, bit packing, and the
//! position-filled reconstruction.
//!
//! Amplitude ladders use (1/sqrt(2)) steps, the eType-II style
//! alphabet; the per-port amplitude codebook reserves its last index
//! for an exact zero. The packed payload is MSB-first: the
//! polarization ratio index (Q_n bits), then per port in selection
//! order an amplitude index (Q_a bits) and a phase index (Q_p bits).
//! The global amplitude scale is never fed back: precoders are
//! column-normalized, so only the channel direction matters.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use std::f64::consts::PI;

use crate::bits::{BitWriter, FeedbackBitstream};
use crate::cmat::CMat;
use crate::error::{Error, Result};
use crate::rng::substream;

/// How the selected ports are ordered in the feedback vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortMethod {
    /// Power descending (the raw selection order).
    None,
    /// Angular index ascending, then delay index.
    AngularDelay,
    /// Delay index ascending, then angular index.
    DelayAngular,
    /// UL amplitude descending.
    Amplitude,
    /// Seeded shuffle; the sanity baseline.
    Random(u64),
}

impl SortMethod {
    pub fn parse(s: &str, seed: u64) -> Result<SortMethod> {
        match s {
            "angular-delay" => Ok(SortMethod::AngularDelay),
            "delay-angular" => Ok(SortMethod::DelayAngular),
            "amplitude" => Ok(SortMethod::Amplitude),
            "random" => Ok(SortMethod::Random(seed)),
            other => Err(Error::Config(format!(
                "unknown sorting method `{other}` (expected angular-delay, delay-angular, amplitude or random)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SortMethod::None => "none",
            SortMethod::AngularDelay => "angular-delay",
            SortMethod::DelayAngular => "delay-angular",
            SortMethod::Amplitude => "amplitude",
            SortMethod::Random(_) => "random",
        }
    }
}

/// An ordered list of selected (angular row, delay column) ports plus
/// the UL powers that drove the selection, kept in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct PortSelection {
    pub ports: Vec<(usize, usize)>,
    pub method: SortMethod,
    pub source_powers: Vec<f64>,
}

impl PortSelection {
    pub fn len(&self) -> usize {
        self.ports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }
}

/// Quantization bit widths; the payload length is
/// `B = Q_n + N_p (Q_a + Q_p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeIIQuantConfig {
    pub q_n: u32,
    pub q_a: u32,
    pub q_p: u32,
}

impl Default for TypeIIQuantConfig {
    fn default() -> Self {
        TypeIIQuantConfig {
            q_n: 5,
            q_a: 2,
            q_p: 3,
        }
    }
}

impl TypeIIQuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_n < 1 || self.q_a < 1 || self.q_p < 1 {
            return Err(Error::Config(format!(
                "quantizer bit widths must all be >= 1, got q_n={}, q_a={}, q_p={}",
                self.q_n, self.q_a, self.q_p
            )));
        }
        Ok(())
    }
}

/// Total codebook payload bits for `n_p` ports.
pub fn feedback_bit_length(cfg: &TypeIIQuantConfig, n_p: usize) -> usize {
    cfg.q_n as usize + n_p * (cfg.q_a + cfg.q_p) as usize
}

/// Unpack metadata for a codebook payload. The strong-polarization flag
/// rides with the port indices as BS-side control information; it is
/// not part of the counted feedback bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodebookLayout {
    pub cfg: TypeIIQuantConfig,
    pub n_p: usize,
    /// 0 if antennas [0, n_t/2) hold the stronger polarization.
    pub strong_pol: usize,
}

/// A packed codebook payload with its layout descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookPayload {
    pub bits: FeedbackBitstream,
    pub layout: CodebookLayout,
}

/// Picks the `n_p` strongest ports of the UL angular-delay matrix,
/// power-descending, ties broken by (row, column) ascending.
pub fn select_ports(h_ul_ad: &CMat, n_p: usize) -> Result<PortSelection> {
    let total = h_ul_ad.rows() * h_ul_ad.cols();
    if n_p == 0 || n_p > total {
        return Err(Error::Config(format!(
            "n_p must be in [1, {total}], got {n_p}"
        )));
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for r in 0..h_ul_ad.rows() {
        for c in 0..h_ul_ad.cols() {
            entries.push((h_ul_ad[(r, c)].norm_sqr(), r, c));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite powers")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    entries.truncate(n_p);
    Ok(PortSelection {
        ports: entries.iter().map(|&(_, r, c)| (r, c)).collect(),
        method: SortMethod::None,
        source_powers: entries.iter().map(|&(p, _, _)| p).collect(),
    })
}

/// Reorders a selection by the given method.
pub fn sort_ports(sel: &PortSelection, method: SortMethod) -> PortSelection {
    let mut idx: Vec<usize> = (0..sel.ports.len()).collect();
    match method {
        SortMethod::None => {}
        SortMethod::AngularDelay => idx.sort_by_key(|&i| sel.ports[i]),
        SortMethod::DelayAngular => idx.sort_by_key(|&i| (sel.ports[i].1, sel.ports[i].0)),
        SortMethod::Amplitude => idx.sort_by(|&a, &b| {
            sel.source_powers[b]
                .partial_cmp(&sel.source_powers[a])
                .expect("finite powers")
                .then(sel.ports[a].cmp(&sel.ports[b]))
        }),
        SortMethod::Random(seed) => {
            let mut rng = substream(seed, "port-shuffle", &[]);
            idx.shuffle(&mut rng);
        }
    }
    PortSelection {
        ports: idx.iter().map(|&i| sel.ports[i]).collect(),
        method,
        source_powers: idx.iter().map(|&i| sel.source_powers[i]).collect(),
    }
}

/// Reads the DL coefficients of the selected ports, in selection order.
pub fn gather_coefficients(h_dl_ad: &CMat, sel: &PortSelection) -> Result<Vec<Complex64>> {
    let mut w = Vec::with_capacity(sel.ports.len());
    for &(r, c) in &sel.ports {
        if r >= h_dl_ad.rows() || c >= h_dl_ad.cols() {
            return Err(Error::Invariant(format!(
                "port ({r},{c}) outside {}x{} matrix",
                h_dl_ad.rows(),
                h_dl_ad.cols()
            )));
        }
        w.push(h_dl_ad[(r, c)]);
    }
    Ok(w)
}

fn ladder_level(q: u32) -> f64 {
    (1.0 / 2f64.sqrt()).powi(q as i32)
}

/// Nearest ladder index to `ratio` in the log domain, clamped to
/// [0, max_idx].
fn ladder_index(ratio: f64, max_idx: u32) -> u32 {
    if ratio <= 0.0 {
        return max_idx;
    }
    let q_real = -2.0 * ratio.log2();
    (q_real.round() as i64).clamp(0, max_idx as i64) as u32
}

fn phase_index(angle: f64, q_p: u32) -> u32 {
    let n = 1u32 << q_p;
    let step = 2.0 * PI / n as f64;
    let idx = (angle / step).round() as i64;
    idx.rem_euclid(n as i64) as u32
}

fn pol_of(port: (usize, usize), n_t: usize) -> usize {
    usize::from(port.0 >= n_t / 2)
}

/// Quantizes the coefficient vector: a polarization ratio on the
/// zero-free ladder, then per port a ladder amplitude (with reserved
/// zero) relative to its polarization maximum and a uniform phase.
pub fn quantize_typeii(
    w_dl: &[Complex64],
    sel: &PortSelection,
    cfg: &TypeIIQuantConfig,
    n_t: usize,
) -> Result<CodebookPayload> {
    cfg.validate()?;
    if w_dl.len() != sel.ports.len() {
        return Err(Error::Shape {
            op: "quantize_typeii",
            left: vec![w_dl.len()],
            right: vec![sel.ports.len()],
        });
    }
    let mut pol_max = [0.0f64; 2];
    for (v, &port) in w_dl.iter().zip(&sel.ports) {
        let p = pol_of(port, n_t);
        pol_max[p] = pol_max[p].max(v.norm());
    }
    let strong = usize::from(pol_max[1] > pol_max[0]);
    let weak = 1 - strong;
    let rho = if pol_max[strong] > 0.0 {
        pol_max[weak] / pol_max[strong]
    } else {
        0.0
    };
    let rho_idx = ladder_index(rho, (1u32 << cfg.q_n) - 1);

    let zero_amp_idx = (1u32 << cfg.q_a) - 1;
    let mut writer = BitWriter::new();
    writer.write(rho_idx, cfg.q_n as usize);
    for (v, &port) in w_dl.iter().zip(&sel.ports) {
        let p = pol_of(port, n_t);
        let rel = if pol_max[p] > 0.0 {
            v.norm() / pol_max[p]
        } else {
            0.0
        };
        let amp_idx = if rel <= 0.0 {
            zero_amp_idx
        } else {
            // Underflow more than half a log-step below the smallest
            // ladder level maps to the reserved zero.
            let q_real = -2.0 * rel.log2();
            if q_real >= (zero_amp_idx - 1) as f64 + 0.5 {
                zero_amp_idx
            } else {
                ladder_index(rel, zero_amp_idx - 1)
            }
        };
        let ph_idx = phase_index(v.arg(), cfg.q_p);
        writer.write(amp_idx, cfg.q_a as usize);
        writer.write(ph_idx, cfg.q_p as usize);
    }
    let bits = writer.finish();
    debug_assert_eq!(bits.bit_len(), feedback_bit_length(cfg, sel.ports.len()));
    Ok(CodebookPayload {
        bits,
        layout: CodebookLayout {
            cfg: *cfg,
            n_p: sel.ports.len(),
            strong_pol: strong,
        },
    })
}

/// Rebuilds the coefficient vector from a payload. The strong
/// polarization's maximum amplitude is normalized to one; the weak
/// polarization is scaled by the decoded ratio.
pub fn dequantize_typeii(
    payload: &CodebookPayload,
    sel: &PortSelection,
    n_t: usize,
) -> Result<Vec<Complex64>> {
    let cfg = &payload.layout.cfg;
    if sel.ports.len() != payload.layout.n_p {
        return Err(Error::Shape {
            op: "dequantize_typeii",
            left: vec![sel.ports.len()],
            right: vec![payload.layout.n_p],
        });
    }
    let mut reader = payload.bits.reader();
    let rho_idx = reader.read(cfg.q_n as usize)?;
    let rho = ladder_level(rho_idx);
    let zero_amp_idx = (1u32 << cfg.q_a) - 1;
    let phase_step = 2.0 * PI / (1u64 << cfg.q_p) as f64;
    let mut w = Vec::with_capacity(sel.ports.len());
    for &port in &sel.ports {
        let amp_idx = reader.read(cfg.q_a as usize)?;
        let ph_idx = reader.read(cfg.q_p as usize)?;
        let amp = if amp_idx == zero_amp_idx {
            0.0
        } else {
            ladder_level(amp_idx)
        };
        let pol_scale = if pol_of(port, n_t) == payload.layout.strong_pol {
            1.0
        } else {
            rho
        };
        w.push(Complex64::from_polar(
            pol_scale * amp,
            phase_step * ph_idx as f64,
        ));
    }
    Ok(w)
}

/// Scatters the coefficient vector onto an all-zero angular-delay
/// matrix at the selected ports.
pub fn reconstruct_codebook(
    w: &[Complex64],
    sel: &PortSelection,
    n_t: usize,
    m: usize,
) -> Result<CMat> {
    if w.len() != sel.ports.len() {
        return Err(Error::Shape {
            op: "reconstruct_codebook",
            left: vec![w.len()],
            right: vec![sel.ports.len()],
        });
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = CMat::zeros(n_t, m);
    for (&(r, c), &v) in sel.ports.iter().zip(w) {
        if r >= n_t || c >= m {
            return Err(Error::Invariant(format!(
                "port ({r},{c}) outside {n_t}x{m} grid"
            )));
        }
        if !seen.insert((r, c)) {
            return Err(Error::Invariant(format!("duplicate port ({r},{c})")));
        }
        out[(r, c)] = v;
    }
    Ok(out)
}
