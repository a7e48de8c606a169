//! Datasets: IDX files, stratified subsets and a synthetic teacher task.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::ActivationKind;
use crate::error::{EpError, Result};
use crate::model::{LayeredDenseParams, ModelParams};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs and targets, one row per sample. For classification data the
/// targets are one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// N × d, row-major.
    inputs: Tensor,
    /// N × c.
    targets: Tensor,
    /// Shape of one input as seen by the model, e.g. `[784]` or `[1, 28, 28]`.
    sample_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.ndim() != 2 || targets.ndim() != 2 || inputs.shape()[0] != targets.shape()[0] {
            return Err(EpError::Shape {
                op: "dataset",
                expected: vec![inputs.shape().first().copied().unwrap_or(0), 0],
                found: targets.shape().to_vec(),
            });
        }
        let d = inputs.shape()[1];
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
            sample_shape: vec![d],
        })
    }

    /// Builds a classification set from row inputs and class indices.
    pub fn from_labels(name: impl Into<String>, inputs: Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let mut targets = Tensor::zeros(&[labels.len(), classes]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(EpError::InvalidInput(format!("label {l} at row {i} is not below {classes}")));
            }
            targets.data_mut()[i * classes + l] = 1.0;
        }
        Dataset::new(name, inputs, targets)
    }

    /// Presents each input with `shape` (same element count), e.g. for conv
    /// models.
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.input_dim() {
            return Err(EpError::Shape {
                op: "sample shape",
                expected: vec![self.input_dim()],
                found: shape.to_vec(),
            });
        }
        self.sample_shape = shape.to_vec();
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn target_dim(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        let c = self.target_dim();
        &self.targets.data()[i * c..(i + 1) * c]
    }

    pub fn input(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.input_row(i).to_vec()).expect("sample shape checked")
    }

    pub fn target(&self, i: usize) -> Tensor {
        Tensor::vector(self.target_row(i).to_vec())
    }

    /// Index of the largest target entry (first on ties).
    pub fn label(&self, i: usize) -> usize {
        crate::tensor::argmax_slice(self.target_row(i))
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (d, c) = (self.input_dim(), self.target_dim());
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            x.extend_from_slice(self.input_row(i));
            y.extend_from_slice(self.target_row(i));
        }
        Dataset {
            name: name.into(),
            inputs: Tensor::new(vec![indices.len(), d], x).expect("row count matches"),
            targets: Tensor::new(vec![indices.len(), c], y).expect("row count matches"),
            sample_shape: self.sample_shape.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| EpError::Format {
            offset: offset as u64,
            message: format!("truncated before {what}"),
        })
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(EpError::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(EpError::Format {
            offset: 16 + body.len().min(need) as u64,
            message: format!("image data holds {} bytes, header promises {need}", body.len()),
        });
    }
    Ok((n, rows * cols, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn parse_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(EpError::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(EpError::Format {
            offset: 8 + body.len().min(n) as u64,
            message: format!("label data holds {} bytes, header promises {n}", body.len()),
        });
    }
    body.iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(EpError::Format {
                    offset: 8 + i as u64,
                    message: format!("label {l} is not below {classes}"),
                })
            }
        })
        .collect()
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Pixels are divided by 255; labels become one-hot rows over 10 classes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = std::fs::read(ip).map_err(|e| EpError::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| EpError::io(lp, e))?;
    let (n, d, pixels) = parse_images(&ib).map_err(|e| in_file(e, ip))?;
    let labels = parse_labels(&lb, 10).map_err(|e| in_file(e, lp))?;
    if labels.len() != n {
        return Err(EpError::Integrity(format!(
            "{} holds {n} images but {} holds {} labels",
            ip.display(),
            lp.display(),
            labels.len()
        )));
    }
    let name = ip.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::from_labels(name, Tensor::new(vec![n, d], pixels)?, &labels, 10)
}

fn in_file(e: EpError, path: &Path) -> EpError {
    match e {
        EpError::Format { offset, message } => EpError::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Writes `dataset` as IDX files. Pixels are stored as `round(255·v)`;
/// inputs must form square images.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let d = dataset.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(EpError::InvalidInput(format!("{d} inputs do not form a square image")));
    }
    let n = dataset.len() as u32;
    let mut ib = Vec::with_capacity(16 + dataset.len() * d);
    for v in [IMAGES_MAGIC, n, side as u32, side as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(dataset.inputs.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + dataset.len());
    for v in [LABELS_MAGIC, n] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..dataset.len() {
        let l = dataset.label(i);
        lb.push(u8::try_from(l).map_err(|_| EpError::InvalidInput(format!("label {l} does not fit a byte")))?);
    }
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, ib).map_err(|e| EpError::io(ip, e))?;
    std::fs::write(lp, lb).map_err(|e| EpError::io(lp, e))
}

/// Class-stratified sample of `n` rows: `n / C` per class with the remainder
/// going to the lowest classes, topped up from other classes when one runs
/// short. Row order is shuffled. Deterministic under `seed`.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let classes = dataset.target_dim();
    if n < classes {
        return Err(EpError::InvalidConfig(format!(
            "cannot stratify {n} samples over {classes} classes"
        )));
    }
    if n > dataset.len() {
        return Err(EpError::InvalidConfig(format!(
            "subset of {n} requested from {} samples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..dataset.len() {
        by_class[dataset.label(i)].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    let mut take: Vec<usize> = (0..classes)
        .map(|c| (n / classes + usize::from(c < n % classes)).min(by_class[c].len()))
        .collect();
    let mut missing = n - take.iter().sum::<usize>();
    while missing > 0 {
        for c in 0..classes {
            if missing > 0 && take[c] < by_class[c].len() {
                take[c] += 1;
                missing -= 1;
            }
        }
    }
    let mut chosen: Vec<usize> = by_class.iter().zip(&take).flat_map(|(idx, &k)| idx[..k].iter().copied()).collect();
    chosen.shuffle(&mut rng);
    Ok(dataset.select(&chosen, format!("{}[{n}]", dataset.name)))
}

/// Draws `n` inputs uniform in [0, 1] and targets from a random one-layer
/// teacher `y = σ(W·x + b)` with the shifted sigmoid. Returns the data and
/// the teacher.
pub fn synthetic_linked(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Result<(Dataset, ModelParams)> {
    if in_dim == 0 || out_dim == 0 {
        return Err(EpError::InvalidConfig("synthetic dimensions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = LayeredDenseParams::init(&[in_dim, out_dim], &mut rng)?;
    for b in teacher.biases[0].data_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let teacher = ModelParams::LayeredDense(teacher);
    let inputs = Tensor::new(vec![n, in_dim], (0..n * in_dim).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let targets = teacher_targets(&teacher, &inputs)?;
    Ok((Dataset::new("synthetic", inputs, targets)?, teacher))
}

/// Targets of a one-layer teacher for N × d `inputs`.
pub fn teacher_targets(teacher: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let ModelParams::LayeredDense(t) = teacher else {
        return Err(EpError::UnsupportedModel {
            op: "teacher_targets",
            family: teacher.family().name(),
        });
    };
    if t.weights.len() != 1 || inputs.ndim() != 2 {
        return Err(EpError::InvalidInput("a teacher is a single dense layer applied to row inputs".into()));
    }
    let (n, d) = (inputs.shape()[0], inputs.shape()[1]);
    let out = t.weights[0].shape()[0];
    let mut y = Vec::with_capacity(n * out);
    for i in 0..n {
        let x = Tensor::vector(inputs.data()[i * d..(i + 1) * d].to_vec());
        let u = t.weights[0].matvec(&x)?.add(&t.biases[0])?;
        y.extend(u.data().iter().map(|&v| ActivationKind::ShiftedSigmoid.apply(v)));
    }
    Tensor::new(vec![n, out], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_bytes(n: u32, side: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut ib = Vec::new();
        for v in [IMAGES_MAGIC, n, side, side] {
            ib.extend_from_slice(&v.to_be_bytes());
        }
        ib.extend_from_slice(pixels);
        let mut lb = Vec::new();
        for v in [LABELS_MAGIC, labels.len() as u32] {
            lb.extend_from_slice(&v.to_be_bytes());
        }
        lb.extend_from_slice(labels);
        (ib, lb)
    }

    fn write(dir: &Path, ib: &[u8], lb: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
        std::fs::write(&ip, ib).unwrap();
        std::fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn single_blank_image_labelled_seven() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = idx_bytes(1, 28, &[0u8; 784], &[7]);
        let (ip, lp) = write(dir.path(), &ib, &lb);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.input_dim(), 784);
        assert!(d.input_row(0).iter().all(|&v| v == 0.0));
        let mut one_hot = vec![0.0; 10];
        one_hot[7] = 1.0;
        assert_eq!(d.target_row(0), one_hot.as_slice());
        assert_eq!(d.label(0), 7);
    }

    #[test]
    fn pixels_are_scaled_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = idx_bytes(1, 2, &[0, 51, 255, 128], &[1]);
        let (ip, lp) = write(dir.path(), &ib, &lb);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.input_row(0), &[0.0, 0.2, 1.0, 128.0 / 255.0]);
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ib, lb) = idx_bytes(2, 2, &[0; 8], &[1, 2]);
        let mut bad = ib.clone();
        bad[3] = 0x01;
        let (ip, lp) = write(dir.path(), &bad, &lb);
        assert!(matches!(load_idx(&ip, &lp), Err(EpError::Format { offset: 0, .. })));
        let (ip, lp) = write(dir.path(), &ib[..ib.len() - 1], &lb);
        assert!(matches!(load_idx(&ip, &lp), Err(EpError::Format { offset: 23, .. })));
        let (ip, lp) = write(dir.path(), &ib[..10], &lb);
        assert!(matches!(load_idx(&ip, &lp), Err(EpError::Format { offset: 8, .. })));
        let (_, lb3) = idx_bytes(3, 2, &[], &[1, 2, 3]);
        let (ip, lp) = write(dir.path(), &ib, &lb3);
        assert!(matches!(load_idx(&ip, &lp), Err(EpError::Integrity(_))));
        let (_, lbad) = idx_bytes(2, 2, &[], &[1, 12]);
        let (ip, lp) = write(dir.path(), &ib, &lbad);
        assert!(matches!(load_idx(&ip, &lp), Err(EpError::Format { offset: 9, .. })));
        assert!(matches!(load_idx(dir.path().join("nope"), &lp), Err(EpError::Io { .. })));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 16).map(|i| (i * 5) as u8).collect();
        let (ib, lb) = idx_bytes(3, 4, &pixels, &[0, 9, 4]);
        let (ip, lp) = write(dir.path(), &ib, &lb);
        let d = load_idx(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("a"), dir.path().join("b"));
        write_idx(&d, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), ib);
        assert_eq!(std::fs::read(&lp2).unwrap(), lb);
    }

    fn labelled(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat(c).take(k)).collect();
        let n = labels.len();
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::from_labels("toy", x, &labels, counts.len()).unwrap()
    }

    #[test]
    fn stratified_counts() {
        let d = labelled(&[150, 130, 120, 110, 105, 140, 101, 160, 100, 119]);
        let s = subset(&d, 1000, 3).unwrap();
        let mut counts = [0usize; 10];
        for l in s.labels() {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100), "{counts:?}");
        let s2 = subset(&d, 1005, 3).unwrap();
        let mut counts = [0usize; 10];
        for l in s2.labels() {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| (100..=101).contains(&c)), "{counts:?}");
    }

    #[test]
    fn subset_is_deterministic_and_full_subset_permutes() {
        let d = labelled(&[3, 5, 2, 4, 6, 1, 3, 2, 5, 4]);
        assert_eq!(subset(&d, 20, 9).unwrap(), subset(&d, 20, 9).unwrap());
        let full = subset(&d, d.len(), 1).unwrap();
        let mut rows: Vec<f64> = (0..full.len()).map(|i| full.input_row(i)[0]).collect();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, (0..d.len()).map(|i| i as f64).collect::<Vec<_>>());
        assert!(matches!(subset(&d, 9, 1), Err(EpError::InvalidConfig(_))));
        assert!(matches!(subset(&d, d.len() + 1, 1), Err(EpError::InvalidConfig(_))));
    }

    #[test]
    fn synthetic_is_reproducible_and_teacher_consistent() {
        let (a, ta) = synthetic_linked(5, 4, 3, 11).unwrap();
        let (b, tb) = synthetic_linked(5, 4, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (one, _) = synthetic_linked(1, 2, 2, 0).unwrap();
        assert_eq!(one.len(), 1);
        let bytes = crate::checkpoint::to_bytes(&ta);
        let restored = crate::checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(teacher_targets(&restored, &a.inputs).unwrap(), a.targets);
        assert!(a.inputs.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn subset_rows_come_from_the_source(seed in 0u64..1000, n in 10usize..40) {
            let d = labelled(&[4, 5, 6, 3, 4, 5, 6, 3, 4, 5]);
            let s = subset(&d, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            let mut seen = std::collections::HashSet::new();
            for i in 0..s.len() {
                let row = s.input_row(i)[0] as usize;
                prop_assert!(seen.insert(row));
                prop_assert_eq!(d.label(row), s.label(i));
            }
        }
    }
}
