//! On-disk formats.
//!
//! An artifact named `<base>` is two files: `<base>.manifest.json` and
//! `<base>.bin`. The binary payload is little-endian throughout:
//!
//! ```text
//! dataset:  b"MFGNDAT\0"  u32 format_version
//!           u64 n_train  u64 n_test  u64 d
//!           f64 x_train[n_train*d] (row-major)  f64 y_train[n_train]
//!           f64 x_test[n_test*d]   (row-major)  f64 y_test[n_test]
//!           [u8; 32] sha256 of every preceding byte
//!
//! net:      b"MFGNNET\0"  u32 format_version
//!           u64 v_len  u64 u_rows  u64 d
//!           f64 v[v_len]  f64 u[u_rows*d] (row-major)
//!           [u8; 32] sha256 of every preceding byte
//! ```
//!
//! The manifest repeats the dimensions and the payload hash (lowercase hex
//! in `payload_sha256`). Loading checks, in order: manifest version,
//! magic, payload version, header against manifest dimensions, payload
//! length, checksum.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::teacher::{Dataset, TeacherSpec, TEACHER_SCALING};
use crate::error::{Error, Result};
use crate::model::{Activation, Scaling, TwoLayerNet};

pub const FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 8] = b"MFGNDAT\0";
const NET_MAGIC: &[u8; 8] = b"MFGNNET\0";
const HEADER_LEN: usize = 8 + 4 + 3 * 8;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: String,
    pub teacher: TeacherSpec,
    pub teacher_scaling: Scaling,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub redraws: u32,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub format_version: u32,
    pub kind: String,
    pub m: usize,
    pub d: usize,
    pub scaling: Scaling,
    pub activation: Activation,
    pub payload_sha256: String,
}

/// `(manifest, payload)` paths for an artifact base name. A trailing
/// `.bin` or `.manifest.json` on `base` is ignored.
pub fn artifact_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".bin"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.manifest.json")), PathBuf::from(format!("{stem}.bin")))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8], dims: [usize; 3]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        Writer(buf)
    }

    fn floats<'a>(&mut self, xs: impl IntoIterator<Item = &'a f64>) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn rows(&mut self, m: &DMatrix<f64>) {
        for r in m.row_iter() {
            self.floats(r.iter());
        }
    }

    /// Appends the checksum and returns `(bytes, hex digest)`.
    fn finish(mut self) -> (Vec<u8>, String) {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        (self.0, hex(&digest))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn check_manifest_version(path: &Path, found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION,
            found,
        });
    }
    Ok(())
}

/// Validated view of a payload: header dims and the float body.
struct Payload<'a> {
    path: &'a Path,
    dims: [usize; 3],
    body: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn parse(path: &'a Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + HASH_LEN {
            return Err(malformed(path, format!("{} bytes is shorter than header and checksum", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(malformed(path, "bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let mut dims = [0usize; 3];
        for (k, d) in dims.iter_mut().enumerate() {
            let at = 12 + 8 * k;
            let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            *d = usize::try_from(raw).map_err(|_| malformed(path, format!("dimension {raw} overflows")))?;
        }
        Ok(Payload {
            path,
            dims,
            body: &bytes[HEADER_LEN..bytes.len() - HASH_LEN],
            pos: 0,
        })
    }

    fn expect_floats(&self, count: usize) -> Result<()> {
        let want = count.checked_mul(8).ok_or_else(|| malformed(self.path, "size overflow"))?;
        if self.body.len() != want {
            return Err(malformed(
                self.path,
                format!("payload has {} bytes of data, header implies {want}", self.body.len()),
            ));
        }
        Ok(())
    }

    fn take(&mut self, count: usize) -> Vec<f64> {
        let out = self.body[self.pos..self.pos + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 8 * count;
        out
    }

    fn take_matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, &self.take(rows * cols))
    }
}

fn verify_checksum(path: &Path, bytes: &[u8], manifest_sha: &str) -> Result<()> {
    let split = bytes.len() - HASH_LEN;
    let computed = sha256_hex(&bytes[..split]);
    let stored = hex(&bytes[split..]);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: stored,
            computed,
        });
    }
    if manifest_sha != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: manifest_sha.to_string(),
            computed,
        });
    }
    Ok(())
}

fn check_dim(context: &str, manifest: usize, header: usize) -> Result<()> {
    if manifest != header {
        return Err(Error::dim(context, manifest, header));
    }
    Ok(())
}

/// Writes a dataset; returns the payload hash.
pub fn save_dataset(base: &Path, ds: &Dataset) -> Result<String> {
    let (manifest_path, bin_path) = artifact_paths(base);
    let mut w = Writer::new(DATASET_MAGIC, [ds.n_train(), ds.n_test(), ds.d()]);
    w.rows(&ds.x_train);
    w.floats(ds.y_train.iter());
    w.rows(&ds.x_test);
    w.floats(ds.y_test.iter());
    let (bytes, sha) = w.finish();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: "dataset".into(),
        teacher: ds.teacher_spec,
        teacher_scaling: TEACHER_SCALING,
        data_seed: ds.data_seed,
        n_train: ds.n_train(),
        n_test: ds.n_test(),
        d: ds.d(),
        redraws: ds.redraws,
        payload_sha256: sha.clone(),
    };
    write_file(&bin_path, &bytes)?;
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(sha)
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_file(path)?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| malformed(path, e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed(path, "missing format_version"))?;
    check_manifest_version(path, u32::try_from(version).unwrap_or(u32::MAX))?;
    serde_json::from_value(raw).map_err(|e| malformed(path, e.to_string()))
}

pub fn load_dataset(base: &Path) -> Result<Dataset> {
    let (manifest_path, bin_path) = artifact_paths(base);
    let manifest: DatasetManifest = read_manifest(&manifest_path)?;
    if manifest.kind != "dataset" {
        return Err(malformed(&manifest_path, format!("kind is {:?}, expected \"dataset\"", manifest.kind)));
    }
    let bytes = read_file(&bin_path)?;
    let mut p = Payload::parse(&bin_path, &bytes, DATASET_MAGIC)?;
    let [n_train, n_test, d] = p.dims;
    check_dim("dataset n_train (manifest vs payload)", manifest.n_train, n_train)?;
    check_dim("dataset n_test (manifest vs payload)", manifest.n_test, n_test)?;
    check_dim("dataset d (manifest vs payload)", manifest.d, d)?;
    check_dim("dataset d (teacher vs payload)", manifest.teacher.d, d)?;
    let count = (n_train + n_test)
        .checked_mul(d + 1)
        .ok_or_else(|| malformed(&bin_path, "size overflow"))?;
    p.expect_floats(count)?;
    verify_checksum(&bin_path, &bytes, &manifest.payload_sha256)?;
    if manifest.teacher_scaling != TEACHER_SCALING {
        return Err(malformed(&manifest_path, "unsupported teacher scaling"));
    }

    let x_train = p.take_matrix(n_train, d);
    let y_train = DVector::from_vec(p.take(n_train));
    let x_test = p.take_matrix(n_test, d);
    let y_test = DVector::from_vec(p.take(n_test));
    Ok(Dataset {
        teacher_spec: manifest.teacher,
        data_seed: manifest.data_seed,
        teacher: manifest.teacher.build()?,
        x_train,
        y_train,
        x_test,
        y_test,
        redraws: manifest.redraws,
    })
}

/// Writes a network; returns the payload hash.
pub fn save_net(base: &Path, net: &TwoLayerNet) -> Result<String> {
    let (manifest_path, bin_path) = artifact_paths(base);
    let mut w = Writer::new(NET_MAGIC, [net.m(), net.m(), net.d()]);
    w.floats(net.v().iter());
    w.rows(net.u());
    let (bytes, sha) = w.finish();
    let manifest = NetManifest {
        format_version: FORMAT_VERSION,
        kind: "net".into(),
        m: net.m(),
        d: net.d(),
        scaling: net.scaling(),
        activation: net.activation(),
        payload_sha256: sha.clone(),
    };
    write_file(&bin_path, &bytes)?;
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(sha)
}

pub fn load_net(base: &Path) -> Result<TwoLayerNet> {
    let (manifest_path, bin_path) = artifact_paths(base);
    let manifest: NetManifest = read_manifest(&manifest_path)?;
    if manifest.kind != "net" {
        return Err(malformed(&manifest_path, format!("kind is {:?}, expected \"net\"", manifest.kind)));
    }
    let bytes = read_file(&bin_path)?;
    let mut p = Payload::parse(&bin_path, &bytes, NET_MAGIC)?;
    let [v_len, u_rows, d] = p.dims;
    check_dim("net v length (manifest M vs payload)", manifest.m, v_len)?;
    check_dim("net hidden rows (manifest M vs payload)", manifest.m, u_rows)?;
    check_dim("net d (manifest vs payload)", manifest.d, d)?;
    let count = v_len
        .checked_add(u_rows.checked_mul(d).ok_or_else(|| malformed(&bin_path, "size overflow"))?)
        .ok_or_else(|| malformed(&bin_path, "size overflow"))?;
    p.expect_floats(count)?;
    verify_checksum(&bin_path, &bytes, &manifest.payload_sha256)?;
    let v = DVector::from_vec(p.take(v_len));
    let u = p.take_matrix(u_rows, d);
    TwoLayerNet::new(v, u, manifest.scaling, manifest.activation)
}
