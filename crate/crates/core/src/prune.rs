//! Magnitude pruning masks and sparsity accounting.
//!
//! Masks only ever zero weights; tensors keep their shapes. Ties in
//! magnitude are broken by `(tensor index, flat position)` ascending, so a
//! mask is a pure function of the weights, the target and the prior mask.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::engine::NamedTensor;
use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 4] = b"RWLM";
pub const MASK_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// `true` where the weight survives.
    pub keep: Vec<bool>,
}

impl MaskTensor {
    pub fn dense(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn survivors(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    fn structure_len(&self) -> Result<usize> {
        match self.shape.first() {
            Some(&lead) if lead > 0 && self.keep.len() / lead > 0 => Ok(self.keep.len() / lead),
            _ => Err(Error::InvalidArgument(format!(
                "tensor `{}` with shape {:?} has no non-empty output structures",
                self.name, self.shape
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    tensors: Vec<MaskTensor>,
    target_sparsity: f64,
}

/// `kernel_count / nonzero_kernel_count`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CompressionRatio(f64);

impl CompressionRatio {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 1.0 && value.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "compression ratio must be a finite value >= 1, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn from_counts(kernel_count: usize, nonzero: usize) -> Result<Self> {
        if nonzero == 0 {
            return Err(Error::FullyPruned);
        }
        Self::new(kernel_count as f64 / nonzero as f64)
    }

    /// `c = 1 / (1 - s)`.
    pub fn from_sparsity(sparsity: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must lie in [0, 1), got {sparsity}"
            )));
        }
        Self::new(1.0 / (1.0 - sparsity))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `s = 1 - 1 / c`.
    pub fn sparsity(self) -> f64 {
        1.0 - 1.0 / self.0
    }

    /// `floor(kernel_count / c)`.
    pub fn survivors(self, kernel_count: usize) -> usize {
        (kernel_count as f64 / self.0 + 1e-9).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// One magnitude ranking across every prunable tensor.
    #[default]
    Global,
    /// Each tensor pruned to the target on its own.
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    #[default]
    Unstructured,
    /// Whole output channels (conv) or output rows (dense).
    Structured,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneOptions {
    pub kind: PruneKind,
    pub scope: PruneScope,
    /// Tensors that are never pruned; they still count as kernel weights.
    pub exempt: Vec<String>,
}

impl PruneMask {
    /// Mask that keeps everything.
    pub fn dense(kernels: &[&NamedTensor]) -> Self {
        Self {
            tensors: kernels
                .iter()
                .map(|k| MaskTensor::dense(k.name.clone(), k.tensor.shape()))
                .collect(),
            target_sparsity: 0.0,
        }
    }

    pub fn from_tensors(tensors: Vec<MaskTensor>, target_sparsity: f64) -> Result<Self> {
        for t in &tensors {
            if t.shape.iter().product::<usize>() != t.keep.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask `{}` has {} entries for shape {:?}",
                    t.name,
                    t.keep.len(),
                    t.shape
                )));
            }
        }
        Ok(Self {
            tensors,
            target_sparsity,
        })
    }

    pub fn tensors(&self) -> &[MaskTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&MaskTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn kernel_count(&self) -> usize {
        self.tensors.iter().map(|t| t.keep.len()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.tensors.iter().map(MaskTensor::survivors).sum()
    }

    pub fn pruned_count(&self) -> usize {
        self.kernel_count() - self.nonzero_count()
    }

    pub fn sparsity(&self) -> f64 {
        let total = self.kernel_count();
        if total == 0 {
            return 0.0;
        }
        self.pruned_count() as f64 / total as f64
    }

    pub fn compression(&self) -> Result<CompressionRatio> {
        CompressionRatio::from_counts(self.kernel_count(), self.nonzero_count())
    }

    /// Whether every survivor of `self` also survives in `other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.keep.len() == b.keep.len()
                    && a.keep.iter().zip(&b.keep).all(|(&x, &y)| !x || y)
            })
    }

    /// Zeroes masked positions of the named tensor; unknown names are left alone.
    pub fn apply_to(&self, name: &str, data: &mut [f32]) {
        if let Some(m) = self.get(name) {
            for (v, &k) in data.iter_mut().zip(&m.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    fn check_against(&self, kernels: &[&NamedTensor]) -> Result<()> {
        if self.tensors.len() != kernels.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} tensors, {} supplied",
                self.tensors.len(),
                kernels.len()
            )));
        }
        for (m, k) in self.tensors.iter().zip(kernels) {
            if m.name != k.name || m.shape != k.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "mask `{}` {:?} does not align with tensor `{}` {:?}",
                    m.name,
                    m.shape,
                    k.name,
                    k.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Zeroes every masked position; other tensors and positions are untouched.
pub fn apply_mask(weights: &mut [NamedTensor], mask: &PruneMask) {
    for t in weights {
        mask.apply_to(&t.name, t.tensor.data_mut());
    }
}

pub fn compression_of(mask: &PruneMask) -> Result<CompressionRatio> {
    mask.compression()
}

pub fn sparsity_of(mask: &PruneMask) -> f64 {
    mask.sparsity()
}

/// Sparsity after `rounds` rounds that each prune `step` of the survivors.
pub fn iterative_sparsity(step: f64, rounds: u32) -> Result<f64> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iterative step must lie in (0, 1), got {step}"
        )));
    }
    Ok(1.0 - (1.0 - step).powi(rounds as i32))
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity must lie in [0, 1), got {s}"
        )));
    }
    Ok(())
}

/// `floor(s * n)`, robust to representation error just below an integer.
fn masked_target(s: f64, n: usize) -> usize {
    ((s * n as f64) + 1e-9).floor() as usize
}

fn start_mask(kernels: &[&NamedTensor], existing: Option<&PruneMask>) -> Result<PruneMask> {
    match existing {
        Some(m) => {
            m.check_against(kernels)?;
            Ok(m.clone())
        }
        None => Ok(PruneMask::dense(kernels)),
    }
}

fn warn_empty_layers(mask: &PruneMask) {
    for t in &mask.tensors {
        if !t.keep.is_empty() && t.survivors() == 0 {
            log::warn!("every weight of `{}` is pruned", t.name);
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    magnitude: f32,
    tensor: usize,
    pos: usize,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.magnitude
        .total_cmp(&b.magnitude)
        .then(a.tensor.cmp(&b.tensor))
        .then(a.pos.cmp(&b.pos))
}

/// Masks the `count` smallest candidates.
fn mask_smallest(mask: &mut PruneMask, mut candidates: Vec<Candidate>, count: usize) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    if candidates.len() < count {
        return Err(Error::InvalidArgument(format!(
            "target needs {count} more pruned weights but only {} are eligible",
            candidates.len()
        )));
    }
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count - 1, candidate_order);
    }
    for c in &candidates[..count] {
        mask.tensors[c.tensor].keep[c.pos] = false;
    }
    Ok(())
}

/// Unstructured magnitude pruning of individual weights.
///
/// Under global scope exactly `floor(s * kernel_count)` positions end up
/// masked (prior masks included); per-layer scope applies the same rule to
/// each tensor. Previously masked positions stay masked.
pub fn prune_unstructured(
    kernels: &[&NamedTensor],
    target_sparsity: f64,
    options: &PruneOptions,
    existing: Option<&PruneMask>,
) -> Result<PruneMask> {
    check_sparsity(target_sparsity)?;
    let mut mask = start_mask(kernels, existing)?;
    mask.target_sparsity = target_sparsity;
    let eligible = |name: &str| !options.exempt.iter().any(|e| e == name);
    let survivors_of = |mask: &PruneMask, ti: usize| -> Vec<Candidate> {
        let k = kernels[ti];
        k.tensor
            .data()
            .iter()
            .zip(&mask.tensors[ti].keep)
            .enumerate()
            .filter(|(_, (_, &keep))| keep)
            .map(|(pos, (w, _))| Candidate {
                magnitude: w.abs(),
                tensor: ti,
                pos,
            })
            .collect()
    };
    match options.scope {
        PruneScope::Global => {
            let want = masked_target(target_sparsity, mask.kernel_count());
            let need = want.saturating_sub(mask.pruned_count());
            let candidates: Vec<Candidate> = (0..kernels.len())
                .filter(|&ti| eligible(&kernels[ti].name))
                .flat_map(|ti| survivors_of(&mask, ti))
                .collect();
            mask_smallest(&mut mask, candidates, need)?;
        }
        PruneScope::PerLayer => {
            for (ti, k) in kernels.iter().enumerate() {
                if !eligible(&k.name) {
                    continue;
                }
                let t = &mask.tensors[ti];
                let want = masked_target(target_sparsity, t.keep.len());
                let need = want.saturating_sub(t.keep.len() - t.survivors());
                let candidates = survivors_of(&mask, ti);
                mask_smallest(&mut mask, candidates, need)?;
            }
        }
    }
    warn_empty_layers(&mask);
    Ok(mask)
}

/// Structured magnitude pruning: whole leading-axis slices (conv output
/// channels, dense output rows) ranked by mean `|w|`, masked in ascending
/// order until the pruned fraction first reaches the target.
pub fn prune_structured(
    kernels: &[&NamedTensor],
    target_sparsity: f64,
    options: &PruneOptions,
    existing: Option<&PruneMask>,
) -> Result<PruneMask> {
    check_sparsity(target_sparsity)?;
    let mut mask = start_mask(kernels, existing)?;
    mask.target_sparsity = target_sparsity;
    let mut structures: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (ti, k) in kernels.iter().enumerate() {
        let len = mask.tensors[ti].structure_len()?;
        if options.exempt.contains(&k.name) {
            continue;
        }
        for (si, chunk) in k.tensor.data().chunks(len).enumerate() {
            let keep = &mask.tensors[ti].keep[si * len..(si + 1) * len];
            if keep.iter().all(|&x| !x) {
                continue;
            }
            let mean = chunk.iter().map(|w| f64::from(w.abs())).sum::<f64>() / len as f64;
            structures.push((mean, ti, si, len));
        }
    }
    structures.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let reached = |pruned: usize, total: usize| pruned as f64 + 1e-9 >= target_sparsity * total as f64;
    match options.scope {
        PruneScope::Global => {
            let total = mask.kernel_count();
            let mut pruned = mask.pruned_count();
            for &(_, ti, si, len) in &structures {
                if reached(pruned, total) {
                    break;
                }
                pruned += mask_structure(&mut mask.tensors[ti], si, len);
            }
            if !reached(pruned, total) {
                return Err(Error::InvalidArgument(format!(
                    "structured target {target_sparsity} unreachable with the eligible structures"
                )));
            }
        }
        PruneScope::PerLayer => {
            for (ti, k) in kernels.iter().enumerate() {
                if options.exempt.contains(&k.name) {
                    continue;
                }
                let total = mask.tensors[ti].keep.len();
                let mut pruned = total - mask.tensors[ti].survivors();
                for &(_, _, si, len) in structures.iter().filter(|s| s.1 == ti) {
                    if reached(pruned, total) {
                        break;
                    }
                    pruned += mask_structure(&mut mask.tensors[ti], si, len);
                }
            }
        }
    }
    warn_empty_layers(&mask);
    Ok(mask)
}

fn mask_structure(t: &mut MaskTensor, index: usize, len: usize) -> usize {
    let slot = &mut t.keep[index * len..(index + 1) * len];
    let newly = slot.iter().filter(|&&k| k).count();
    slot.iter_mut().for_each(|k| *k = false);
    newly
}

/// Dispatches on [`PruneOptions::kind`].
pub fn prune(
    kernels: &[&NamedTensor],
    target_sparsity: f64,
    options: &PruneOptions,
    existing: Option<&PruneMask>,
) -> Result<PruneMask> {
    match options.kind {
        PruneKind::Unstructured => prune_unstructured(kernels, target_sparsity, options, existing),
        PruneKind::Structured => prune_structured(kernels, target_sparsity, options, existing),
    }
}

/// Serializes a mask: `RWLM`, version byte, target sparsity (f64), tensor
/// count (u32), then per tensor its name (u32 length + UTF-8), rank (u32),
/// dims (u32 each) and the keep bits packed LSB-first. All little-endian.
pub fn encode_mask(mask: &PruneMask) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    buf.push(MASK_VERSION);
    buf.extend_from_slice(&mask.target_sparsity.to_le_bytes());
    binio::put_u32(&mut buf, mask.tensors.len() as u32);
    for t in &mask.tensors {
        binio::put_str(&mut buf, &t.name);
        binio::put_dims(&mut buf, &t.shape);
        for chunk in t.keep.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |b, (i, &k)| b | (u8::from(k) << i));
            buf.push(byte);
        }
    }
    buf
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<PruneMask> {
    let mut r = ByteReader::new(bytes, path);
    if r.bytes(4, "magic")? != MASK_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "missing RWLM magic".into(),
        });
    }
    let version = r.u8("version")?;
    if version != MASK_VERSION {
        return Err(r.error(format!("unsupported mask version {version}")));
    }
    let target = r.f64("target sparsity")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let shape = r.dims()?;
        let n: usize = shape.iter().product();
        let packed = r.bytes(n.div_ceil(8), "mask bits")?;
        let keep = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        tensors.push(MaskTensor { name, shape, keep });
    }
    if !r.at_end() {
        return Err(r.error("trailing bytes after last tensor"));
    }
    PruneMask::from_tensors(tensors, target)
}

pub fn write_mask(path: &Path, mask: &PruneMask) -> Result<()> {
    binio::atomic_write(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<PruneMask> {
    decode_mask(&binio::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn named(name: &str, shape: &[usize], v: &[f32]) -> NamedTensor {
        NamedTensor::new(name, Tensor::from_slice(shape.to_vec(), v).unwrap())
    }

    fn keep(mask: &PruneMask, i: usize) -> Vec<u8> {
        mask.tensors()[i].keep.iter().map(|&k| u8::from(k)).collect()
    }

    #[test]
    fn unstructured_removes_smallest() {
        let w = named("w", &[4], &[0.5, -0.1, 0.3, -0.9]);
        let m = prune_unstructured(&[&w], 0.5, &PruneOptions::default(), None).unwrap();
        assert_eq!(keep(&m, 0), vec![1, 0, 0, 1]);
    }

    #[test]
    fn global_ranking_spans_tensors() {
        let a = named("a", &[2], &[1.0, 2.0]);
        let b = named("b", &[2], &[0.1, 3.0]);
        let m = prune_unstructured(&[&a, &b], 0.25, &PruneOptions::default(), None).unwrap();
        assert_eq!(keep(&m, 0), vec![1, 1]);
        assert_eq!(keep(&m, 1), vec![0, 1]);
    }

    #[test]
    fn ties_break_by_tensor_then_position() {
        let a = named("a", &[3], &[0.5, 0.5, 0.5]);
        let b = named("b", &[2], &[0.5, -0.5]);
        let m = prune_unstructured(&[&a, &b], 0.6, &PruneOptions::default(), None).unwrap();
        assert_eq!(keep(&m, 0), vec![0, 0, 0]);
        assert_eq!(keep(&m, 1), vec![1, 1]);
    }

    #[test]
    fn per_layer_scope_prunes_each_tensor() {
        let a = named("a", &[4], &[1.0, 2.0, 3.0, 4.0]);
        let b = named("b", &[4], &[10.0, 20.0, 30.0, 40.0]);
        let opts = PruneOptions {
            scope: PruneScope::PerLayer,
            ..Default::default()
        };
        let m = prune_unstructured(&[&a, &b], 0.5, &opts, None).unwrap();
        assert_eq!(keep(&m, 0), vec![0, 0, 1, 1]);
        assert_eq!(keep(&m, 1), vec![0, 0, 1, 1]);
    }

    #[test]
    fn exempt_tensors_are_untouched() {
        let a = named("a", &[2], &[0.01, 0.02]);
        let b = named("b", &[2], &[1.0, 2.0]);
        let opts = PruneOptions {
            exempt: vec!["a".into()],
            ..Default::default()
        };
        let m = prune_unstructured(&[&a, &b], 0.5, &opts, None).unwrap();
        assert_eq!(keep(&m, 0), vec![1, 1]);
        assert_eq!(keep(&m, 1), vec![0, 0]);
    }

    #[test]
    fn prior_mask_is_preserved() {
        let w = named("w", &[4], &[0.5, -0.1, 0.3, -0.9]);
        let first = prune_unstructured(&[&w], 0.25, &PruneOptions::default(), None).unwrap();
        // weights drifted so the pruned one would no longer be smallest
        let drifted = named("w", &[4], &[0.5, 0.0, 0.05, -0.9]);
        let second =
            prune_unstructured(&[&drifted], 0.5, &PruneOptions::default(), Some(&first)).unwrap();
        assert_eq!(keep(&second, 0), vec![1, 0, 0, 1]);
        assert!(second.is_subset_of(&first));
    }

    #[test]
    fn structured_rows() {
        let w = named("w", &[2, 2], &[1.0, -1.0, 0.1, 0.2]);
        let m = prune_structured(&[&w], 0.5, &PruneOptions::default(), None).unwrap();
        assert_eq!(keep(&m, 0), vec![1, 1, 0, 0]);
    }

    #[test]
    fn structured_channels_by_mean_magnitude() {
        // [out=4, kh=1, kw=1, in=2]; channel means 0.4, 0.1, 0.3, 0.2
        let w = named("k", &[4, 1, 1, 2], &[0.4, -0.4, 0.0, 0.2, 0.3, -0.3, -0.1, 0.3]);
        let m = prune_structured(&[&w], 0.5, &PruneOptions::default(), None).unwrap();
        assert_eq!(keep(&m, 0), vec![1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn structured_zero_target_is_identity() {
        let w = named("w", &[2, 2], &[1.0, -1.0, 0.1, 0.2]);
        let m = prune_structured(&[&w], 0.0, &PruneOptions::default(), None).unwrap();
        assert_eq!(m.nonzero_count(), 4);
    }

    #[test]
    fn structure_size_zero_is_an_error() {
        let w = NamedTensor::new("s", Tensor::new(Vec::<usize>::new(), vec![1.0f32]).unwrap());
        assert!(prune_structured(&[&w], 0.5, &PruneOptions::default(), None).is_err());
    }

    #[test]
    fn apply_mask_zeroes_and_is_idempotent() {
        let w = named("w", &[4], &[0.5, -0.1, 0.3, -0.9]);
        let other = named("bias", &[2], &[7.0, 8.0]);
        let m = prune_unstructured(&[&w], 0.5, &PruneOptions::default(), None).unwrap();
        let mut ws = vec![w.clone(), other.clone()];
        apply_mask(&mut ws, &m);
        assert_eq!(ws[0].tensor.data(), &[0.5, 0.0, 0.0, -0.9]);
        assert!(ws[1].tensor.bit_eq(&other.tensor));
        let once = ws.clone();
        apply_mask(&mut ws, &m);
        assert!(ws[0].tensor.bit_eq(&once[0].tensor));

        let dense = PruneMask::dense(&[&w]);
        let mut untouched = vec![w.clone()];
        apply_mask(&mut untouched, &dense);
        assert!(untouched[0].tensor.bit_eq(&w.tensor));

        let all_zero = PruneMask::from_tensors(
            vec![MaskTensor {
                name: "w".into(),
                shape: vec![4],
                keep: vec![false; 4],
            }],
            0.0,
        )
        .unwrap();
        apply_mask(&mut untouched, &all_zero);
        assert!(untouched[0].tensor.data().iter().all(|&v| v == 0.0));
        assert!(matches!(all_zero.compression(), Err(Error::FullyPruned)));
    }

    #[test]
    fn compression_accounting() {
        let c = CompressionRatio::from_sparsity(0.893).unwrap();
        assert!((c.value() - 9.35).abs() < 0.01);
        let c = CompressionRatio::new(100.0).unwrap();
        assert_eq!(c.survivors(10_954_160), 109_541);
        let w = named("w", &[3], &[1.0, 2.0, 3.0]);
        let m = PruneMask::dense(&[&w]);
        assert_eq!(m.compression().unwrap().value(), 1.0);
        assert_eq!(m.sparsity(), 0.0);
    }

    #[test]
    fn iterative_sparsity_examples() {
        assert!((iterative_sparsity(0.3, 1).unwrap() - 0.3).abs() < 1e-12);
        assert!((iterative_sparsity(0.3, 2).unwrap() - 0.51).abs() < 1e-12);
        assert!((iterative_sparsity(0.2, 10).unwrap() - 0.892_625_817_6).abs() < 1e-12);
        assert_eq!(iterative_sparsity(0.2, 0).unwrap(), 0.0);
        assert!(iterative_sparsity(1.0, 1).is_err());
    }

    #[test]
    fn invalid_target_is_rejected() {
        let w = named("w", &[2], &[1.0, 2.0]);
        assert!(prune_unstructured(&[&w], 1.0, &PruneOptions::default(), None).is_err());
        assert!(prune_unstructured(&[&w], -0.1, &PruneOptions::default(), None).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let w = named("conv/kernel", &[3, 1, 1, 3], &[0.5, -0.1, 0.3, -0.9, 0.2, 0.8, 0.05, 0.6, 0.7]);
        let m = prune_unstructured(&[&w], 0.4, &PruneOptions::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rwlm");
        write_mask(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RWLM");
        assert_eq!(bytes[4], MASK_VERSION);
        assert_eq!(read_mask(&path).unwrap(), m);
        let err = decode_mask(&bytes[..bytes.len() - 1], &path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
