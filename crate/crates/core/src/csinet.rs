//! The learned feedback model: a two-block FC encoder with a quantized
//! tanh latent, and a decoder that scatters the coarse coefficient
//! vector back onto its angular-delay ports (position filling) before
//! refining with a residual convolutional stack. A no-position-filling
//! ablation reuses the same encoder and FC decoder but stops at the
//! scattered coarse estimate.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::bits::{BitWriter, FeedbackBitstream};
use crate::cmat::CMat;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensorkit::{quant_level, BnBatchStats, Mode, ParameterSet, Tape, Tensor, ValueId};
use crate::typeii::PortSelection;

pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture and quantizer settings. `feedback_bits` is the bit
/// budget B; the latent uses `latent_width() * latent_bits_per_unit <=
/// B` bits (one unit short of B when B is odd).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_p: usize,
    pub n_t: usize,
    pub m: usize,
    pub feedback_bits: usize,
    pub latent_bits_per_unit: u32,
    pub hidden_width: usize,
    pub conv_channels: usize,
    pub conv_blocks: usize,
    pub lrelu_enc: f64,
    pub lrelu_dec: f64,
    pub dropout_dec: f64,
    pub surrogate_temp: f64,
    pub ablation_no_fill: bool,
}

impl ModelConfig {
    pub fn new(n_p: usize, n_t: usize, m: usize, feedback_bits: usize) -> Self {
        ModelConfig {
            n_p,
            n_t,
            m,
            feedback_bits,
            latent_bits_per_unit: 2,
            hidden_width: 1024,
            conv_channels: 128,
            conv_blocks: 10,
            lrelu_enc: 0.3,
            lrelu_dec: 0.1,
            dropout_dec: 0.02,
            surrogate_temp: 25.0,
            ablation_no_fill: false,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.feedback_bits / self.latent_bits_per_unit as usize
    }

    pub fn latent_bits(&self) -> usize {
        self.latent_width() * self.latent_bits_per_unit as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_p > self.n_t * self.m {
            return Err(Error::Config(format!(
                "n_p must be in [1, {}], got {}",
                self.n_t * self.m,
                self.n_p
            )));
        }
        if self.latent_bits_per_unit < 1 {
            return Err(Error::Config("latent_bits_per_unit must be >= 1".into()));
        }
        if self.latent_width() == 0 {
            return Err(Error::Config(format!(
                "feedback budget {} cannot fit one {}-bit latent unit",
                self.feedback_bits, self.latent_bits_per_unit
            )));
        }
        if self.latent_bits() > self.feedback_bits {
            return Err(Error::Config(
                "latent bit usage exceeds the feedback budget".into(),
            ));
        }
        if self.conv_blocks < 2 || (self.conv_blocks - 2) % 2 != 0 {
            return Err(Error::Config(format!(
                "conv_blocks must be even and >= 2, got {}",
                self.conv_blocks
            )));
        }
        Ok(())
    }

    /// Stable digest of every architecture-relevant field; checkpoints
    /// refuse to load into a model with a different digest.
    pub fn digest(&self) -> u64 {
        let desc = format!(
            "np={} nt={} m={} bits={} qu={} hidden={} ch={} blocks={} le={} ld={} do={} temp={} nofill={}",
            self.n_p,
            self.n_t,
            self.m,
            self.feedback_bits,
            self.latent_bits_per_unit,
            self.hidden_width,
            self.conv_channels,
            self.conv_blocks,
            self.lrelu_enc,
            self.lrelu_dec,
            self.dropout_dec,
            self.surrogate_temp,
            self.ablation_no_fill
        );
        crate::rng::derive_seed(0, &desc, &[])
    }
}

/// Tape handles of one forward pass.
pub struct ForwardOut {
    /// Reconstruction (batch, 2, n_t, m) in the normalized input scale.
    pub recon: ValueId,
    /// Quantized latent (batch, latent_width).
    pub latent: ValueId,
}

#[derive(Debug, Clone)]
pub struct CsiNet {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = substream(seed, name, &[]);
    Tensor::uniform(shape, bound, &mut rng).with_grad()
}

impl CsiNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParameterSet::new();
        let in_dim = 2 * cfg.n_p;
        let latent = cfg.latent_width();

        let fc_block = |p: &mut ParameterSet, prefix: &str, fi: usize, fo: usize, bn: bool| {
            p.insert(
                &format!("{prefix}.weight"),
                xavier(&[fi, fo], fi, fo, seed, &format!("init.{prefix}.weight")),
            );
            p.insert(&format!("{prefix}.bias"), Tensor::zeros(&[fo]).with_grad());
            if bn {
                insert_bn(p, prefix, fo);
            }
        };
        fc_block(&mut p, "enc.fcb1", in_dim, cfg.hidden_width, true);
        fc_block(&mut p, "enc.fcb2", cfg.hidden_width, latent, true);
        fc_block(&mut p, "dec.fcb", latent, in_dim, false);

        for blk in 1..=cfg.conv_blocks {
            let (c_in, c_out) = self::conv_widths(&cfg, blk);
            let prefix = format!("dec.cb{blk}");
            p.insert(
                &format!("{prefix}.kernel"),
                xavier(
                    &[c_out, c_in, 3, 3],
                    c_in * 9,
                    c_out * 9,
                    seed,
                    &format!("init.{prefix}.kernel"),
                ),
            );
            p.insert(&format!("{prefix}.bias"), Tensor::zeros(&[c_out]).with_grad());
            if blk != cfg.conv_blocks {
                insert_bn(&mut p, &prefix, c_out);
            }
        }
        Ok(CsiNet { cfg, params: p })
    }

    /// Registers every parameter (and frozen buffer) as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, ValueId> {
        let mut ids = BTreeMap::new();
        for (name, t) in self.params.iter() {
            ids.insert(name.clone(), tape.leaf(t));
        }
        ids
    }

    /// Builds the normalized encoder input [Re(w)/s ; Im(w)/s] and the
    /// normalizer s = max |w_i| (1 when w is all-zero).
    pub fn encoder_input(w: &[Complex64]) -> (Vec<f64>, f64) {
        let mut s = w.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        if s == 0.0 {
            s = 1.0;
        }
        let mut x = Vec::with_capacity(2 * w.len());
        x.extend(w.iter().map(|v| v.re / s));
        x.extend(w.iter().map(|v| v.im / s));
        (x, s)
    }

    fn fc_bn_act(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        prefix: &str,
        x: ValueId,
        mode: Mode,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<ValueId> {
        let y = tape.fc(x, ids[&format!("{prefix}.weight")], ids[&format!("{prefix}.bias")])?;
        self.bn(tape, ids, prefix, y, mode, bn_updates)
    }

    fn bn(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        prefix: &str,
        x: ValueId,
        mode: Mode,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<ValueId> {
        let gamma = ids[&format!("{prefix}.bn.gamma")];
        let beta = ids[&format!("{prefix}.bn.beta")];
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, gamma, beta)?;
                bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => tape.batchnorm_eval(
                x,
                gamma,
                beta,
                self.params.get(&format!("{prefix}.bn.running_mean")).data(),
                self.params.get(&format!("{prefix}.bn.running_var")).data(),
            ),
        }
    }

    /// Encoder through the latent quantizer. Input is (batch, 2 n_p).
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: ValueId,
        mode: Mode,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<ValueId> {
        let h1 = self.fc_bn_act(tape, ids, "enc.fcb1", x, mode, bn_updates)?;
        let a1 = tape.leaky_relu(h1, self.cfg.lrelu_enc)?;
        let h2 = self.fc_bn_act(tape, ids, "enc.fcb2", a1, mode, bn_updates)?;
        let t = tape.tanh(h2);
        tape.quantize_ste(t, self.cfg.latent_bits_per_unit, self.cfg.surrogate_temp)
    }

    /// Decoder from latent levels to the reconstruction grid
    /// (batch, 2, n_t, m). In the ablation the scattered coarse
    /// coefficients are the final output.
    pub fn decode_tape(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        latent: ValueId,
        ports: &[Vec<(usize, usize)>],
        mode: Mode,
        dropout_seed: u64,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<ValueId> {
        let mut h = tape.fc(latent, ids["dec.fcb.weight"], ids["dec.fcb.bias"])?;
        if mode == Mode::Train && self.cfg.dropout_dec > 0.0 {
            h = tape.dropout(h, self.cfg.dropout_dec, dropout_seed)?;
        }
        let v = tape.scatter_ports(h, ports, self.cfg.n_t, self.cfg.m)?;
        if self.cfg.ablation_no_fill {
            // Coarse coefficients scattered to their ports, no conv
            // refinement.
            return Ok(v);
        }
        let conv =
            |tape: &mut Tape, blk: usize, x: ValueId| -> Result<ValueId> {
                tape.conv2d(
                    x,
                    ids[&format!("dec.cb{blk}.kernel")],
                    ids[&format!("dec.cb{blk}.bias")],
                )
            };
        // CB1: conv -> BN -> LReLU
        let c1 = conv(tape, 1, v)?;
        let b1 = self.bn(tape, ids, "dec.cb1", c1, mode, bn_updates)?;
        let mut a = tape.leaky_relu(b1, self.cfg.lrelu_dec)?;
        // Middle blocks in residual pairs: the pair input re-enters
        // before the second activation.
        let mut blk = 2;
        while blk + 1 < self.cfg.conv_blocks {
            let c_a = conv(tape, blk, a)?;
            let b_a = self.bn(tape, ids, &format!("dec.cb{blk}"), c_a, mode, bn_updates)?;
            let act = tape.leaky_relu(b_a, self.cfg.lrelu_dec)?;
            let c_b = conv(tape, blk + 1, act)?;
            let b_b = self.bn(tape, ids, &format!("dec.cb{}", blk + 1), c_b, mode, bn_updates)?;
            let res = tape.residual_add(b_b, a)?;
            a = tape.leaky_relu(res, self.cfg.lrelu_dec)?;
            blk += 2;
        }
        // Final block: plain conv back to 2 channels, then the global
        // shortcut restoring the coarse estimate.
        let c_last = conv(tape, self.cfg.conv_blocks, a)?;
        tape.residual_add(c_last, v)
    }

    /// Full forward: normalized coefficient batch to reconstruction.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: ValueId,
        ports: &[Vec<(usize, usize)>],
        mode: Mode,
        dropout_seed: u64,
        bn_updates: &mut Vec<(String, BnBatchStats)>,
    ) -> Result<ForwardOut> {
        let latent = self.encode_tape(tape, ids, x, mode, bn_updates)?;
        let recon = self.decode_tape(tape, ids, latent, ports, mode, dropout_seed, bn_updates)?;
        Ok(ForwardOut { recon, latent })
    }

    /// Applies momentum updates from train-mode batchnorm statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnBatchStats)]) {
        for (prefix, stats) in updates {
            let rm = self.params.get_mut(&format!("{prefix}.bn.running_mean"));
            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.params.get_mut(&format!("{prefix}.bn.running_var"));
            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Eval-mode encode of one coefficient vector: the quantized latent
    /// levels plus the packed index bitstream.
    pub fn encode(&self, w_dl: &[Complex64]) -> Result<(Vec<f64>, FeedbackBitstream)> {
        if w_dl.len() != self.cfg.n_p {
            return Err(Error::Shape {
                op: "encode input",
                left: vec![w_dl.len()],
                right: vec![self.cfg.n_p],
            });
        }
        let (x, _) = Self::encoder_input(w_dl);
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let xid = tape.constant(Tensor::from_vec(&[1, x.len()], x)?);
        let mut sink = Vec::new();
        let latent = self.encode_tape(&mut tape, &ids, xid, Mode::Eval, &mut sink)?;
        let levels = tape.value(latent).data().to_vec();
        let indices = tape.quant_indices(latent).expect("latent is quantized");
        let mut w = BitWriter::new();
        for &idx in indices {
            w.write(idx as u32, self.cfg.latent_bits_per_unit as usize);
        }
        Ok((levels, w.finish()))
    }

    /// Unpacks latent index bits back to midpoint levels.
    pub fn unpack_latent(&self, bits: &FeedbackBitstream) -> Result<Vec<f64>> {
        let width = self.cfg.latent_width();
        let qu = self.cfg.latent_bits_per_unit;
        if bits.bit_len() != width * qu as usize {
            return Err(Error::Format(format!(
                "latent payload is {} bits, expected {}",
                bits.bit_len(),
                width * qu as usize
            )));
        }
        let mut reader = bits.reader();
        (0..width)
            .map(|_| Ok(quant_level(reader.read(qu as usize)?, 1 << qu)))
            .collect()
    }

    /// Eval-mode decode to an angular-delay matrix in the normalized
    /// scale (multiply by the per-UE normalizer to undo scaling).
    pub fn decode(&self, bits: &FeedbackBitstream, sel: &PortSelection) -> Result<CMat> {
        let levels = self.unpack_latent(bits)?;
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let lid = tape.constant(Tensor::from_vec(&[1, levels.len()], levels)?);
        let mut sink = Vec::new();
        let recon = self.decode_tape(
            &mut tape,
            &ids,
            lid,
            &[sel.ports.clone()],
            Mode::Eval,
            0,
            &mut sink,
        )?;
        grid_to_cmat(tape.value(recon).data(), 0, self.cfg.n_t, self.cfg.m)
    }

    /// Eval-mode end-to-end pass for a batch of UEs sharing the model.
    /// Returns angular-delay reconstructions scaled back by each UE's
    /// normalizer.
    pub fn forward_eval_batch(
        &self,
        ws: &[Vec<Complex64>],
        sels: &[PortSelection],
    ) -> Result<Vec<CMat>> {
        if ws.is_empty() {
            return Ok(Vec::new());
        }
        let mut xs = Vec::with_capacity(ws.len() * 2 * self.cfg.n_p);
        let mut scales = Vec::with_capacity(ws.len());
        for w in ws {
            let (x, s) = Self::encoder_input(w);
            xs.extend(x);
            scales.push(s);
        }
        let ports: Vec<Vec<(usize, usize)>> = sels.iter().map(|s| s.ports.clone()).collect();
        let mut tape = Tape::new();
        let ids = self.register(&mut tape);
        let xid = tape.constant(Tensor::from_vec(&[ws.len(), 2 * self.cfg.n_p], xs)?);
        let mut sink = Vec::new();
        let out = self.forward_tape(&mut tape, &ids, xid, &ports, Mode::Eval, 0, &mut sink)?;
        let data = tape.value(out.recon).data();
        (0..ws.len())
            .map(|s| {
                let mut m = grid_to_cmat(data, s, self.cfg.n_t, self.cfg.m)?;
                let scale = Complex64::new(scales[s], 0.0);
                m = m.scale(scale);
                Ok(m)
            })
            .collect()
    }
}

fn conv_widths(cfg: &ModelConfig, blk: usize) -> (usize, usize) {
    if blk == 1 {
        (2, cfg.conv_channels)
    } else if blk == cfg.conv_blocks {
        (cfg.conv_channels, 2)
    } else {
        (cfg.conv_channels, cfg.conv_channels)
    }
}

fn insert_bn(p: &mut ParameterSet, prefix: &str, c: usize) {
    p.insert(&format!("{prefix}.bn.gamma"), Tensor::full(&[c], 1.0).with_grad());
    p.insert(&format!("{prefix}.bn.beta"), Tensor::zeros(&[c]).with_grad());
    p.insert(&format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c]));
    p.insert(&format!("{prefix}.bn.running_var"), Tensor::full(&[c], 1.0));
}

/// Reads sample `s` of a (batch, 2, n_t, m) grid into a complex matrix.
pub fn grid_to_cmat(data: &[f64], s: usize, n_t: usize, m: usize) -> Result<CMat> {
    let plane = n_t * m;
    let base = s * 2 * plane;
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        out.push(Complex64::new(data[base + i], data[base + plane + i]));
    }
    CMat::from_vec(n_t, m, out)
}

/// Adjoint of the position-filling scatter: reads the grid values at
/// the selected ports back into coefficient order.
pub fn gather_ports(grid: &[f64], ports: &[(usize, usize)], n_t: usize, m: usize) -> Vec<f64> {
    let plane = n_t * m;
    let mut out = Vec::with_capacity(2 * ports.len());
    for &(r, c) in ports {
        out.push(grid[r * m + c]);
    }
    for &(r, c) in ports {
        out.push(grid[plane + r * m + c]);
    }
    out
}
