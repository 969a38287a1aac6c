//! Scene dataset files. Little-endian layout:
//!
//! ```text
//! magic "CSID" | u32 version | u32 scenes | u32 K | u32 N_t | u32 M | u64 seed
//! then per scene, per UE: H_UL, H_DL as (f32 re, f32 im) row-major
//! ```
//!
//! The byte length is exactly `32 + scenes*K*2*N_t*M*8`. Distances and
//! pathloss are baked into the stored channels and not serialized;
//! scenes read back carry NaN in those bookkeeping fields.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::channelgen::{ChannelScene, UeChannel};
use crate::cmat::CMat;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CSID";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub scene_count: u32,
    pub ue_count: u32,
    pub n_t: u32,
    pub subbands: u32,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn body_bytes(&self) -> usize {
        self.scene_count as usize
            * self.ue_count as usize
            * 2
            * self.n_t as usize
            * self.subbands as usize
            * 8
    }
}

fn write_cmat(out: &mut impl Write, m: &CMat) -> Result<()> {
    for z in m.data() {
        out.write_all(&(z.re as f32).to_le_bytes())?;
        out.write_all(&(z.im as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, scenes: &[ChannelScene], seed: u64) -> Result<DatasetHeader> {
    if scenes.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let ue_count = scenes[0].ues.len();
    let n_t = scenes[0].ues[0].h_ul.rows();
    let m = scenes[0].ues[0].h_ul.cols();
    for (i, s) in scenes.iter().enumerate() {
        if s.ues.len() != ue_count {
            return Err(Error::Invariant(format!(
                "scene {i} has {} UEs, expected {ue_count}",
                s.ues.len()
            )));
        }
    }
    let header = DatasetHeader {
        version: DATASET_VERSION,
        scene_count: scenes.len() as u32,
        ue_count: ue_count as u32,
        n_t: n_t as u32,
        subbands: m as u32,
        seed,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&header.version.to_le_bytes())?;
    out.write_all(&header.scene_count.to_le_bytes())?;
    out.write_all(&header.ue_count.to_le_bytes())?;
    out.write_all(&header.n_t.to_le_bytes())?;
    out.write_all(&header.subbands.to_le_bytes())?;
    out.write_all(&header.seed.to_le_bytes())?;
    for scene in scenes {
        for ue in &scene.ues {
            write_cmat(&mut out, &ue.h_ul)?;
            write_cmat(&mut out, &ue.h_dl)?;
        }
    }
    out.flush()?;
    Ok(header)
}

fn read_u32(data: &[u8], off: &mut usize) -> u32 {
    let v = u32::from_le_bytes(data[*off..*off + 4].try_into().unwrap());
    *off += 4;
    v
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ChannelScene>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() < DATASET_HEADER_BYTES || &data[0..4] != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a dataset file (bad magic or short header)",
            path.display()
        )));
    }
    let mut off = 4;
    let version = read_u32(&data, &mut off);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let header = DatasetHeader {
        version,
        scene_count: read_u32(&data, &mut off),
        ue_count: read_u32(&data, &mut off),
        n_t: read_u32(&data, &mut off),
        subbands: read_u32(&data, &mut off),
        seed: u64::from_le_bytes(data[off..off + 8].try_into().unwrap()),
    };
    off += 8;
    let expect = DATASET_HEADER_BYTES + header.body_bytes();
    if data.len() != expect {
        return Err(Error::Format(format!(
            "dataset {} is {} bytes, expected exactly {expect}",
            path.display(),
            data.len()
        )));
    }
    let (n_t, m) = (header.n_t as usize, header.subbands as usize);
    let mut scenes = Vec::with_capacity(header.scene_count as usize);
    for _ in 0..header.scene_count {
        let mut ues = Vec::with_capacity(header.ue_count as usize);
        for _ in 0..header.ue_count {
            let mut mats = [CMat::zeros(n_t, m), CMat::zeros(n_t, m)];
            for mat in &mut mats {
                for i in 0..n_t * m {
                    let re = f32::from_le_bytes(data[off..off + 4].try_into().unwrap());
                    let im = f32::from_le_bytes(data[off + 4..off + 8].try_into().unwrap());
                    mat.data_mut()[i] = Complex64::new(re as f64, im as f64);
                    off += 8;
                }
            }
            let [h_ul, h_dl] = mats;
            ues.push(UeChannel {
                h_ul,
                h_dl,
                distance_m: f64::NAN,
                pathloss_ul_db: f64::NAN,
                pathloss_dl_db: f64::NAN,
            });
        }
        scenes.push(ChannelScene { ues });
    }
    Ok((header, scenes))
}
