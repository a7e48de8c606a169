//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EPCK"              4 bytes
//! version             u32 (= 1)
//! family tag          u8  (1 dense, 2 vector field, 3 conv)
//! layer count         u32 (state layers)
//! conv only:          input c, h, w as u64; pool count u32; pools as u64
//! tensor count        u32
//! per tensor:         ndim u32, dims as u64
//! data                f64 per element, tensors in declaration order
//! ```

use std::path::Path;

use crate::error::{EpError, Result};
use crate::model::{ConvParams, Family, LayeredDenseParams, ModelParams, VectorFieldParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EPCK";
const VERSION: u32 = 1;

/// Serializes `params` to the checkpoint byte format.
pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.family().tag());
    out.extend_from_slice(&(params.num_layers() as u32).to_le_bytes());
    if let ModelParams::Conv(p) = params {
        for d in p.input_shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.pools.len() as u32).to_le_bytes());
        for &k in &p.pools {
            out.extend_from_slice(&(k as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(EpError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| EpError::Format {
            offset: at as u64,
            message: format!("{what} {v} does not fit in memory"),
        })
    }

    fn error(&self, offset: usize, message: String) -> EpError {
        EpError::Format {
            offset: offset as u64,
            message,
        }
    }
}

/// Parses the checkpoint byte format and validates the resulting model.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.error(0, "bad magic, expected \"EPCK\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let tag = r.u8("family tag")?;
    let family = Family::from_tag(tag).ok_or_else(|| r.error(8, format!("unknown family tag {tag}")))?;
    let layers = r.u32("layer count")? as usize;
    let mut conv_aux = None;
    if family == Family::Conv {
        let input = [r.u64("input channels")?, r.u64("input height")?, r.u64("input width")?];
        let n = r.u32("pool count")? as usize;
        let pools = (0..n).map(|_| r.u64("pool size")).collect::<Result<Vec<_>>>()?;
        conv_aux = Some((input, pools));
    }
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    let expected = match (&family, &conv_aux) {
        (Family::LayeredDense, _) => 2 * layers,
        (Family::VectorField, _) => (3 * layers).saturating_sub(1),
        (Family::Conv, _) => 2 * layers,
    };
    let conv_fits = conv_aux.as_ref().map_or(true, |(_, pools)| layers > pools.len());
    if count != expected || layers == 0 || !conv_fits {
        return Err(r.error(
            count_at,
            format!("{count} tensors do not fit a {} model with {layers} layers", family.name()),
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32("tensor rank")? as usize;
        shapes.push((0..ndim).map(|_| r.u64("tensor dimension")).collect::<Result<Vec<_>>>()?);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let at = r.pos;
        let len = len
            .filter(|l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| r.error(at, format!("tensor shape {shape:?} exceeds the file size")))?;
        let raw = r.take(8 * len, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut it = tensors.into_iter();
    let mut next = |n: usize| -> Vec<Tensor> { it.by_ref().take(n).collect() };
    let params = match family {
        Family::LayeredDense => ModelParams::LayeredDense(LayeredDenseParams {
            weights: next(layers),
            biases: next(layers),
        }),
        Family::VectorField => ModelParams::VectorField(VectorFieldParams {
            forward: next(layers),
            backward: next(layers - 1),
            biases: next(layers),
        }),
        Family::Conv => {
            let (input_shape, pools) = conv_aux.expect("conv header always carries pools");
            let c = pools.len();
            let d = layers - c;
            ModelParams::Conv(ConvParams {
                input_shape,
                pools,
                kernels: next(c),
                conv_biases: next(c),
                dense: next(d),
                dense_biases: next(d),
            })
        }
    };
    params.validate().map_err(|e| EpError::Integrity(format!("checkpoint describes an inconsistent model: {e}")))?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)).map_err(|e| EpError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EpError::io(path, e))?;
    from_bytes(&bytes)
}
