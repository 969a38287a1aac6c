//! Clustered synthetic channel generator with UL/DL angular-delay
//! partial reciprocity: both links of a UE share one set of cluster
//! angles and delays, while per-cluster complex gains are drawn
//! independently per link and polarization.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use std::f64::consts::PI;

use crate::cmat::CMat;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const RB_BANDWIDTH_HZ: f64 = 180e3;
/// UE drops closer than this are re-drawn.
pub const MIN_DROP_DISTANCE_M: f64 = 10.0;

/// Geometry and propagation parameters for one scene family.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub ue_count: usize,
    pub n_h: usize,
    pub n_v: usize,
    pub subbands: usize,
    pub rb_per_subband: usize,
    pub f_ul_hz: f64,
    pub f_dl_hz: f64,
    pub cell_radius_m: f64,
    pub cluster_count: usize,
    pub delay_spread_s: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            ue_count: 5,
            n_h: 4,
            n_v: 4,
            subbands: 16,
            rb_per_subband: 4,
            f_ul_hz: 3.4e9,
            f_dl_hz: 3.5e9,
            cell_radius_m: 250.0,
            cluster_count: 6,
            delay_spread_s: 300e-9,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn n_t(&self) -> usize {
        2 * self.n_h * self.n_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.ue_count == 0 {
            return Err(Error::Config("ue_count must be >= 1".into()));
        }
        if self.n_h == 0 || self.n_v == 0 {
            return Err(Error::Config("antenna counts must be >= 1".into()));
        }
        if self.subbands == 0 || self.rb_per_subband == 0 {
            return Err(Error::Config("subbands and rb_per_subband must be >= 1".into()));
        }
        if self.cluster_count == 0 {
            return Err(Error::Config("cluster_count must be >= 1".into()));
        }
        if self.f_ul_hz == self.f_dl_hz {
            return Err(Error::Config(
                "f_ul_hz must differ from f_dl_hz (FDD)".into(),
            ));
        }
        if !(self.delay_spread_s > 0.0) || !(self.cell_radius_m > MIN_DROP_DISTANCE_M) {
            return Err(Error::Config(
                "delay_spread_s must be positive and cell_radius_m above the 10 m floor".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster geometry shared between the UL and DL synthesis of one UE.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub azimuth: Vec<f64>,
    pub zenith: Vec<f64>,
    pub delay_s: Vec<f64>,
    /// Linear powers, normalized to sum to one.
    pub power: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LinkDirection {
    Uplink,
    Downlink,
}

/// One UE of a generated scene.
#[derive(Debug, Clone)]
pub struct UeChannel {
    pub h_ul: CMat,
    pub h_dl: CMat,
    pub distance_m: f64,
    pub pathloss_ul_db: f64,
    pub pathloss_dl_db: f64,
}

/// One drop: paired UL/DL spatial-frequency channels for every UE.
#[derive(Debug, Clone)]
pub struct ChannelScene {
    pub ues: Vec<UeChannel>,
}

/// Uniform planar array response with half-wavelength spacing;
/// `a[p*n_v+q] = exp(j pi (p sin(zenith) sin(azimuth) + q cos(zenith)))`.
pub fn steering_vector(azimuth: f64, zenith: f64, n_h: usize, n_v: usize) -> Vec<Complex64> {
    let mut a = Vec::with_capacity(n_h * n_v);
    for p in 0..n_h {
        for q in 0..n_v {
            let phase = PI * (p as f64 * zenith.sin() * azimuth.sin() + q as f64 * zenith.cos());
            a.push(Complex64::from_polar(1.0, phase));
        }
    }
    a
}

/// Draws the shared angle/delay/power support of one UE.
pub fn generate_cluster_set(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> ClusterSet {
    let l = cfg.cluster_count;
    let exp = Exp::new(1.0 / cfg.delay_spread_s).expect("positive rate");
    let mut azimuth = Vec::with_capacity(l);
    let mut zenith = Vec::with_capacity(l);
    let mut delay_s = Vec::with_capacity(l);
    for _ in 0..l {
        azimuth.push(rng.gen_range(-PI / 3.0..PI / 3.0));
        zenith.push(rng.gen_range(PI / 2.0 - PI / 6.0..PI / 2.0 + PI / 6.0));
        let d: f64 = exp.sample(rng);
        delay_s.push(d.min(4.0 * cfg.delay_spread_s));
    }
    let mut power: Vec<f64> = delay_s
        .iter()
        .map(|&t| (-t / cfg.delay_spread_s).exp())
        .collect();
    let total: f64 = power.iter().sum();
    power.iter_mut().for_each(|p| *p /= total);
    ClusterSet {
        azimuth,
        zenith,
        delay_s,
        power,
    }
}

/// Subband center frequencies around the link carrier.
fn subband_frequencies(cfg: &SceneConfig, carrier_hz: f64) -> Vec<f64> {
    let spacing = cfg.rb_per_subband as f64 * RB_BANDWIDTH_HZ;
    (0..cfg.subbands)
        .map(|m| carrier_hz + (m as f64 - (cfg.subbands as f64 - 1.0) / 2.0) * spacing)
        .collect()
}

/// Synthesizes one link's spatial-frequency channel from the shared
/// clusters. Per-cluster, per-polarization gains have magnitude
/// sqrt(power) and a phase drawn uniformly from this link's stream; the
/// global 1/sqrt(M) keeps E[|H|_F^2] = N_t before pathloss.
pub fn synthesize_channel(
    clusters: &ClusterSet,
    cfg: &SceneConfig,
    link: LinkDirection,
    rng: &mut ChaCha8Rng,
) -> CMat {
    let carrier = match link {
        LinkDirection::Uplink => cfg.f_ul_hz,
        LinkDirection::Downlink => cfg.f_dl_hz,
    };
    let n_half = cfg.n_h * cfg.n_v;
    let n_t = cfg.n_t();
    let m = cfg.subbands;
    let freqs = subband_frequencies(cfg, carrier);
    let scale = 1.0 / (m as f64).sqrt();
    let mut h = CMat::zeros(n_t, m);
    for (l, (&az, &zen)) in clusters.azimuth.iter().zip(&clusters.zenith).enumerate() {
        let a = steering_vector(az, zen, cfg.n_h, cfg.n_v);
        let mag = clusters.power[l].sqrt();
        let gains = [
            Complex64::from_polar(mag, rng.gen_range(0.0..2.0 * PI)),
            Complex64::from_polar(mag, rng.gen_range(0.0..2.0 * PI)),
        ];
        for (mi, &f) in freqs.iter().enumerate() {
            let delay_phase = Complex64::from_polar(scale, -2.0 * PI * f * clusters.delay_s[l]);
            for pol in 0..2 {
                let g = gains[pol] * delay_phase;
                for (i, &ai) in a.iter().enumerate() {
                    h[(pol * n_half + i, mi)] += g * ai;
                }
            }
        }
    }
    h
}

/// Log-distance pathloss in dB; callers guarantee distance >= 10 m.
pub fn pathloss_db(distance_m: f64, f_ghz: f64) -> f64 {
    28.0 + 22.0 * distance_m.log10() + 20.0 * f_ghz.log10()
}

/// Drops one UE uniformly in the cell disc, re-drawing inside the 10 m
/// exclusion radius.
fn drop_distance(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        let d = cfg.cell_radius_m * u.sqrt();
        if d >= MIN_DROP_DISTANCE_M {
            return d;
        }
    }
}

/// Generates the scene with index `scene_index`: a pure function of
/// (cfg, cfg.seed, scene_index).
pub fn generate_scene(cfg: &SceneConfig, scene_index: u64) -> ChannelScene {
    let mut ues = Vec::with_capacity(cfg.ue_count);
    for k in 0..cfg.ue_count as u64 {
        let mut pos_rng = substream(cfg.seed, "ue-drop", &[scene_index, k]);
        let distance_m = drop_distance(cfg, &mut pos_rng);
        let mut cluster_rng = substream(cfg.seed, "clusters", &[scene_index, k]);
        let clusters = generate_cluster_set(cfg, &mut cluster_rng);
        let mut ul_rng = substream(cfg.seed, "gains-ul", &[scene_index, k]);
        let mut dl_rng = substream(cfg.seed, "gains-dl", &[scene_index, k]);
        let mut h_ul = synthesize_channel(&clusters, cfg, LinkDirection::Uplink, &mut ul_rng);
        let mut h_dl = synthesize_channel(&clusters, cfg, LinkDirection::Downlink, &mut dl_rng);
        let pathloss_ul_db = pathloss_db(distance_m, cfg.f_ul_hz / 1e9);
        let pathloss_dl_db = pathloss_db(distance_m, cfg.f_dl_hz / 1e9);
        let amp_ul = 10f64.powf(-pathloss_ul_db / 20.0);
        let amp_dl = 10f64.powf(-pathloss_dl_db / 20.0);
        h_ul.data_mut().iter_mut().for_each(|v| *v *= amp_ul);
        h_dl.data_mut().iter_mut().for_each(|v| *v *= amp_dl);
        ues.push(UeChannel {
            h_ul,
            h_dl,
            distance_m,
            pathloss_ul_db,
            pathloss_dl_db,
        });
    }
    ChannelScene { ues }
}
