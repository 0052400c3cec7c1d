//! On-disk cache for precomputed modal bases.
//!
//! The basis is the expensive artifact of a run; everything downstream is
//! cheap by comparison.  Files are keyed by a SHA-256 of the canonical
//! problem description, so a stale file can never be served for a changed
//! mesh, material, or mode budget.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decomp::{ModalBasis, SubspaceModes};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a basis cache file (bad magic)")]
    BadMagic,
    #[error("unsupported cache format version {found}")]
    BadVersion { found: u32 },
    #[error("corrupt cache file: {what}")]
    Corrupt { what: &'static str },
}

const MAGIC: [u8; 4] = *b"CMSB";
const VERSION: u32 = 1;

/// File path for a given canonical key inside `dir`.
pub fn cache_path(dir: &Path, key_material: &str) -> PathBuf {
    let digest = Sha256::digest(key_material.as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("cms-basis-{hex}.bin"))
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CacheError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_len<R: Read>(r: &mut R, cap: u64) -> Result<usize, CacheError> {
    let v = read_u64(r)?;
    if v > cap {
        return Err(CacheError::Corrupt {
            what: "length field exceeds sanity cap",
        });
    }
    Ok(v as usize)
}

fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, CacheError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_basis<W: Write>(w: &mut W, basis: &ModalBasis) -> Result<(), CacheError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_u64(w, basis.n_free as u64)?;
    write_u64(w, basis.subspaces.len() as u64)?;
    for sub in &basis.subspaces {
        write_u64(w, sub.eigenvalues.len() as u64)?;
        write_f64_slice(w, &sub.eigenvalues)?;
        write_u64(w, sub.modes.nrows() as u64)?;
        write_u64(w, sub.modes.ncols() as u64)?;
        write_f64_slice(w, sub.modes.as_slice())?;
        write_u64(w, sub.support.len() as u64)?;
        for &s in &sub.support {
            write_u64(w, s as u64)?;
        }
    }
    Ok(())
}

pub fn read_basis<R: Read>(r: &mut R) -> Result<ModalBasis, CacheError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let found = u32::from_le_bytes(vbuf);
    if found != VERSION {
        return Err(CacheError::BadVersion { found });
    }
    // Sanity caps keep a corrupt length field from attempting a huge alloc.
    const CAP: u64 = 1 << 32;
    let n_free = read_len(r, CAP)?;
    let n_subspaces = read_len(r, 1 << 20)?;
    let mut subspaces = Vec::with_capacity(n_subspaces);
    for _ in 0..n_subspaces {
        let n_eig = read_len(r, CAP)?;
        let eigenvalues = read_f64_vec(r, n_eig)?;
        let rows = read_len(r, CAP)?;
        let cols = read_len(r, CAP)?;
        if cols != n_eig {
            return Err(CacheError::Corrupt {
                what: "mode count disagrees with eigenvalue count",
            });
        }
        let data = read_f64_vec(r, rows * cols)?;
        let modes = DMatrix::from_vec(rows, cols, data);
        let n_support = read_len(r, CAP)?;
        if n_support != rows {
            return Err(CacheError::Corrupt {
                what: "support length disagrees with mode rows",
            });
        }
        let mut support = Vec::with_capacity(n_support);
        for _ in 0..n_support {
            let s = read_len(r, CAP)?;
            if s >= n_free {
                return Err(CacheError::Corrupt {
                    what: "support index out of range",
                });
            }
            support.push(s);
        }
        subspaces.push(SubspaceModes {
            eigenvalues,
            modes,
            support,
        });
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(ModalBasis { subspaces, n_free }),
        _ => Err(CacheError::Corrupt {
            what: "trailing bytes after basis payload",
        }),
    }
}

/// Writes `basis` under its key, atomically (write-then-rename).
pub fn store(dir: &Path, key_material: &str, basis: &ModalBasis) -> Result<PathBuf, CacheError> {
    fs::create_dir_all(dir)?;
    let path = cache_path(dir, key_material);
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_basis(&mut w, basis)?;
        w.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Loads the basis for a key; `None` when absent, an error when corrupt.
pub fn load(dir: &Path, key_material: &str) -> Result<Option<ModalBasis>, CacheError> {
    let path = cache_path(dir, key_material);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut r = BufReader::new(file);
    read_basis(&mut r).map(Some)
}
