//! Versioned binary checkpoint: generator spec and weights plus the latent
//! bank, with a content checksum.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::generator::{Activation, GeneratorNetwork, LayerKind, LayerSpec};
use crate::latent::VariationalLatentBank;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub net: GeneratorNetwork,
    pub bank: VariationalLatentBank,
    pub seed: u64,
}

fn activation_code(a: Activation) -> (u8, f64) {
    match a {
        Activation::LeakyRectifier(s) => (0, s),
        Activation::Tanh => (1, 0.0),
        Activation::None => (2, 0.0),
    }
}

fn activation_from(code: u8, param: f64) -> Result<Activation, DataError> {
    match code {
        0 => Ok(Activation::LeakyRectifier(param)),
        1 => Ok(Activation::Tanh),
        2 => Ok(Activation::None),
        other => Err(DataError::Parse {
            offset: 0,
            reason: format!("unknown activation code {other}"),
        }),
    }
}

pub fn save_checkpoint(
    path: &Path,
    net: &GeneratorNetwork,
    bank: &VariationalLatentBank,
    seed: u64,
) -> Result<(), DataError> {
    let mut payload: Vec<u8> = Vec::new();
    payload.write_u32::<LittleEndian>(net.latent_dim() as u32)?;
    payload.write_u32::<LittleEndian>(net.n_slice() as u32)?;
    payload.write_u64::<LittleEndian>(seed)?;
    payload.write_u64::<LittleEndian>(net.seed())?;
    payload.write_u32::<LittleEndian>(net.layers().len() as u32)?;
    for layer in net.layers() {
        let (kind, a, b) = match layer.kind {
            LayerKind::Dense { out_h, out_w } => (0u8, out_h as u32, out_w as u32),
            LayerKind::Conv { kernel } => (1, kernel as u32, 0),
            LayerKind::TransposedConv { kernel, stride } => (2, kernel as u32, stride as u32),
            LayerKind::UpsampleConv { kernel } => (3, kernel as u32, 0),
        };
        payload.push(kind);
        payload.write_u32::<LittleEndian>(a)?;
        payload.write_u32::<LittleEndian>(b)?;
        payload.write_u32::<LittleEndian>(layer.in_channels as u32)?;
        payload.write_u32::<LittleEndian>(layer.out_channels as u32)?;
        let (code, param) = activation_code(layer.activation);
        payload.push(code);
        payload.write_f64::<LittleEndian>(param)?;
    }
    payload.write_u64::<LittleEndian>(net.theta().len() as u64)?;
    for &v in net.theta() {
        payload.write_f64::<LittleEndian>(v)?;
    }
    payload.write_u32::<LittleEndian>(bank.n_slice() as u32)?;
    payload.write_u32::<LittleEndian>(bank.n_frames() as u32)?;
    payload.write_u32::<LittleEndian>(bank.latent_dim() as u32)?;
    for &v in bank.mu() {
        payload.write_f64::<LittleEndian>(v)?;
    }
    for &v in bank.rho() {
        payload.write_f64::<LittleEndian>(v)?;
    }

    let mut out = Vec::with_capacity(payload.len() + 40);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 40 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            reason: "not a checkpoint container".into(),
        });
    }
    let version = (&bytes[4..8]).read_u32::<LittleEndian>().unwrap();
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version(version));
    }
    if Sha256::digest(&bytes[40..]).as_slice() != &bytes[8..40] {
        return Err(DataError::Checksum);
    }
    let mut r = crate::data::PayloadReader::new(&bytes[40..]);
    let latent_dim = r.u32()? as usize;
    let n_slice = r.u32()? as usize;
    let seed = r.u64()?;
    let net_seed = r.u64()?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind_code = r.u8()?;
        let a = r.u32()? as usize;
        let b = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let out_channels = r.u32()? as usize;
        let act_code = r.u8()?;
        let act_param = r.f64()?;
        let kind = match kind_code {
            0 => LayerKind::Dense { out_h: a, out_w: b },
            1 => LayerKind::Conv { kernel: a },
            2 => LayerKind::TransposedConv { kernel: a, stride: b },
            3 => LayerKind::UpsampleConv { kernel: a },
            other => {
                return Err(DataError::Parse {
                    offset: 0,
                    reason: format!("unknown layer kind {other}"),
                })
            }
        };
        layers.push(LayerSpec {
            kind,
            in_channels,
            out_channels,
            activation: activation_from(act_code, act_param)?,
        });
    }
    let theta_len = r.u64()? as usize;
    let mut theta = Vec::with_capacity(theta_len);
    for _ in 0..theta_len {
        theta.push(r.f64()?);
    }
    let bank_slices = r.u32()? as usize;
    let bank_frames = r.u32()? as usize;
    let bank_dim = r.u32()? as usize;
    let n = bank_slices * bank_frames * bank_dim;
    let mut mu = Vec::with_capacity(n);
    for _ in 0..n {
        mu.push(r.f64()?);
    }
    let mut rho = Vec::with_capacity(n);
    for _ in 0..n {
        rho.push(r.f64()?);
    }

    let mut net = GeneratorNetwork::new(layers, latent_dim, n_slice, net_seed).map_err(|e| {
        DataError::Parse {
            offset: 0,
            reason: e.to_string(),
        }
    })?;
    if net.param_count() != theta_len {
        return Err(DataError::Parse {
            offset: 0,
            reason: format!(
                "checkpoint carries {theta_len} parameters but the spec needs {}",
                net.param_count()
            ),
        });
    }
    net.theta_mut().copy_from_slice(&theta);
    let bank = VariationalLatentBank::from_parts(bank_slices, bank_frames, bank_dim, mu, rho);
    Ok(Checkpoint { net, bank, seed })
}
