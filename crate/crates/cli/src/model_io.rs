//! On-disk model format — a flat little-endian binary layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic bytes "CPSL"
//! 4       4     format version (u32), currently 1
//! 8       4     d (u32)   embedding dimension
//! 12      4     k (u32)   slots per image
//! 16      4     h (u32)   router hidden dimension
//! 20      ...   row-major f64: W1 (h x d), v (h), W2 (d x d), log_tau (1)
//! ```
//!
//! The float payload order matches the in-memory flat parameter layout, so a
//! write/read cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use compose_core::encoder::{EncoderParams, ProjectionHead, RouterParams};
use compose_core::tensor::Matrix;

const MAGIC: &[u8; 4] = b"CPSL";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct ModelFile {
    pub params: EncoderParams,
    pub num_slots: usize,
}

pub fn save_model(path: &Path, params: &EncoderParams, num_slots: usize) -> Result<(), String> {
    let d = params.head.w2.rows();
    let h = params.router.w1.rows();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(num_slots as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    let mut push = |x: f64| out.extend_from_slice(&x.to_le_bytes());
    for &x in params.router.w1.data() {
        push(x);
    }
    for &x in &params.router.v {
        push(x);
    }
    for &x in params.head.w2.data() {
        push(x);
    }
    push(params.head.log_tau);
    let mut file = std::fs::File::create(path)
        .map_err(|e| format!("cannot create model file {}: {e}", path.display()))?;
    file.write_all(&out).map_err(|e| format!("cannot write model file: {e}"))
}

pub fn load_model(path: &Path) -> Result<ModelFile, String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| format!("cannot open model file {}: {e}", path.display()))?
        .read_to_end(&mut bytes)
        .map_err(|e| format!("cannot read model file: {e}"))?;
    if bytes.len() < 20 || &bytes[0..4] != MAGIC {
        return Err(format!("{} is not a model file (bad magic)", path.display()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("unsupported model format version {version}"));
    }
    let d = u32_at(8) as usize;
    let k = u32_at(12) as usize;
    let h = u32_at(16) as usize;
    let expected = 20 + 8 * (h * d + h + d * d + 1);
    if bytes.len() != expected {
        return Err(format!(
            "model file truncated: {} bytes, expected {expected}",
            bytes.len()
        ));
    }
    let mut off = 20usize;
    let mut next = || {
        let x = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        x
    };
    let mut w1 = Matrix::zeros(h, d);
    for x in w1.data_mut() {
        *x = next();
    }
    let mut v = vec![0.0; h];
    for x in &mut v {
        *x = next();
    }
    let mut w2 = Matrix::zeros(d, d);
    for x in w2.data_mut() {
        *x = next();
    }
    let log_tau = next();
    Ok(ModelFile {
        params: EncoderParams {
            router: RouterParams { w1, v },
            head: ProjectionHead { w2, log_tau },
        },
        num_slots: k,
    })
}
