//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type                       |
//! |--------------|----------------------------|
//! | magic        | `b"DPADVCK\0"`             |
//! | version      | `u32` (= 1)                |
//! | layer count  | `u32` L                    |
//! | widths       | `(L + 1) × u32`            |
//! | activations  | `L × u8` (0 ReLU, 1 identity) |
//! | param count  | `u64` P                    |
//! | parameters   | `P × f64`, flat order      |

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::nn::{Activation, Model, NnError};

pub const MAGIC: &[u8; 8] = b"DPADVCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn write_model<W: Write>(mut w: W, model: &Model) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(model.layers().len() as u32)?;
    for d in model.dims() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for layer in model.layers() {
        w.write_u8(match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        })?;
    }
    let params = model.flat_params();
    w.write_u64::<LittleEndian>(params.len() as u64)?;
    for p in params {
        w.write_f64::<LittleEndian>(p)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<Model, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n_layers = r.read_u32::<LittleEndian>()? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(CheckpointError::Corrupt(format!("{n_layers} layers")));
    }
    let dims = (0..=n_layers)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let mut model = Model::zeros(&dims)?;
    for layer in model.layers_mut() {
        layer.activation = match r.read_u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            b => return Err(CheckpointError::Corrupt(format!("activation byte {b}"))),
        };
    }
    let count = r.read_u64::<LittleEndian>()?;
    if count != model.param_count() as u64 {
        return Err(CheckpointError::Corrupt(format!(
            "{count} parameters for widths {dims:?} (expected {})",
            model.param_count()
        )));
    }
    let mut params = vec![0.0; model.param_count()];
    r.read_f64_into::<LittleEndian>(&mut params)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    model.load_flat_params(&params)?;
    Ok(model)
}
