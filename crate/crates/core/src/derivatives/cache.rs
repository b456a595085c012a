//! Binary cache of a [`CorrectionOperators`] bundle.
//!
//! Little-endian layout: magic `GPRC`, `u32` version, `u64` T, M, n, `u32`
//! policy, the three hyperparameters, the training and test locations (so a
//! cache can be matched to its model), the per-point slices in index order,
//! `K^-1`, then a presence byte and the dense tensors if any. Values are
//! written bit-for-bit, so a round trip is exact. The mean derivatives that
//! depend on the measurements are not stored; they are contracted again from
//! `F` and `G` with the measurements of the model given to [`read_cache`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use super::{CorrectionOperators, DenseOperators, KernelGradSlices, StoragePolicy, DENSE_COV_HESSIAN_MAX_M};
use crate::error::{Error, Result};
use crate::gp::TrainedModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GPRC";
const VERSION: u32 = 1;

fn put_slice<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn get_vec<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<f64>> {
    let mut v = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn put_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    put_slice(w, m.as_slice())
}

fn get_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<DMatrix<f64>> {
    Ok(DMatrix::from_vec(rows, cols, get_vec(r, rows * cols)?))
}

fn get_tensor<R: Read>(r: &mut R, shape: &[usize]) -> std::io::Result<Tensor> {
    Ok(Tensor::from_vec(shape, get_vec(r, shape.iter().product())?))
}

pub fn write_cache(ops: &CorrectionOperators, model: &TrainedModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, ops, model)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_to<W: Write>(w: &mut W, ops: &CorrectionOperators, model: &TrainedModel) -> std::io::Result<()> {
    let hp = model.hyperparams();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for d in [model.t(), model.m(), model.n()] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_u32::<LittleEndian>(ops.policy.code())?;
    put_slice(w, &[hp.alpha, hp.beta, hp.sigma_y])?;
    put_matrix(w, model.training().locations())?;
    put_matrix(w, model.test_grid().locations())?;

    let s = &ops.slices;
    for i in 0..s.len() {
        put_matrix(w, &s.et[i])?;
        put_matrix(w, &s.tt[i])?;
        put_slice(w, s.et_hess[i].data())?;
        put_slice(w, s.tt_hess[i].data())?;
        put_slice(w, s.tt_cross[i].data())?;
    }
    put_matrix(w, &s.k_inv)?;

    match &ops.dense {
        None => w.write_u8(0)?,
        Some(d) => {
            w.write_u8(1)?;
            for t in d.f.iter().chain(&d.g).chain(&d.cov_jac) {
                put_slice(w, t.data())?;
            }
            match &d.cov_hess {
                None => w.write_u8(0)?,
                Some(h) => {
                    w.write_u8(1)?;
                    for t in h {
                        put_slice(w, t.data())?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Load a bundle written by [`write_cache`], rejecting it unless it was built
/// for exactly this model (dimensions, hyperparameters and locations).
pub fn read_cache(path: &Path, model: &TrainedModel) -> Result<CorrectionOperators> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let ops = read_from(&mut r, model).map_err(|e| match e {
        ReadError::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Cache(format!("{} is truncated", path.display()))
        }
        ReadError::Io(e) => Error::io(path, e),
        ReadError::Bad(msg) => Error::Cache(format!("{}: {msg}", path.display())),
    })?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(ops),
        Ok(_) => Err(Error::Cache(format!("{} has trailing bytes", path.display()))),
        Err(e) => Err(Error::io(path, e)),
    }
}

enum ReadError {
    Io(std::io::Error),
    Bad(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

fn read_from<R: Read>(r: &mut R, model: &TrainedModel) -> std::result::Result<CorrectionOperators, ReadError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ReadError::Bad("not an operator cache".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(ReadError::Bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u64::<LittleEndian>()? as usize;
    }
    let [t, m, n] = dims;
    if (t, m, n) != (model.t(), model.m(), model.n()) {
        return Err(ReadError::Bad(format!(
            "built for T={t}, M={m}, n={n} but model has T={}, M={}, n={}",
            model.t(),
            model.m(),
            model.n()
        )));
    }
    let policy = StoragePolicy::from_code(r.read_u32::<LittleEndian>()?)
        .ok_or_else(|| ReadError::Bad("unknown storage policy".into()))?;
    let hp = get_vec(r, 3)?;
    let want = model.hyperparams();
    let same_hp = hp
        .iter()
        .zip([want.alpha, want.beta, want.sigma_y])
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let xt = get_matrix(r, t, n)?;
    let xe = get_matrix(r, m, n)?;
    let bits = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    if !same_hp || !bits(&xt, model.training().locations()) || !bits(&xe, model.test_grid().locations()) {
        return Err(ReadError::Bad("built for a different model".into()));
    }

    let mut slices = KernelGradSlices {
        et: Vec::with_capacity(t),
        tt: Vec::with_capacity(t),
        et_hess: Vec::with_capacity(t),
        tt_hess: Vec::with_capacity(t),
        tt_cross: Vec::with_capacity(t),
        k_inv: DMatrix::zeros(0, 0),
    };
    for _ in 0..t {
        slices.et.push(get_matrix(r, m, n)?);
        slices.tt.push(get_matrix(r, t, n)?);
        slices.et_hess.push(get_tensor(r, &[m, n, n])?);
        slices.tt_hess.push(get_tensor(r, &[t, n, n])?);
        slices.tt_cross.push(get_tensor(r, &[t, n, n])?);
    }
    slices.k_inv = get_matrix(r, t, t)?;

    let dense = match r.read_u8()? {
        0 => None,
        1 => {
            let f = (0..t)
                .map(|_| get_tensor(r, &[m, n, t]))
                .collect::<std::io::Result<_>>()?;
            let g = (0..t * t)
                .map(|_| get_tensor(r, &[m, n, n, t]))
                .collect::<std::io::Result<_>>()?;
            let cov_jac = (0..t)
                .map(|_| get_tensor(r, &[m, m, n]))
                .collect::<std::io::Result<_>>()?;
            let cov_hess = match r.read_u8()? {
                0 => None,
                1 if m <= DENSE_COV_HESSIAN_MAX_M => Some(
                    (0..t * t)
                        .map(|_| get_tensor(r, &[m, m, n, n]))
                        .collect::<std::io::Result<_>>()?,
                ),
                _ => return Err(ReadError::Bad("bad covariance Hessian flag".into())),
            };
            Some(DenseOperators::new(
                f,
                g,
                cov_jac,
                cov_hess,
                model.training().measurements(),
            ))
        }
        _ => return Err(ReadError::Bad("bad dense flag".into())),
    };
    if (policy == StoragePolicy::Dense) != dense.is_some() {
        return Err(ReadError::Bad("policy does not match stored tensors".into()));
    }
    Ok(CorrectionOperators::from_parts(policy, slices, dense))
}
