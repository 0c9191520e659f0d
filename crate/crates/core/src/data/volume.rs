use std::path::Path;

use super::{check_token, field, header_fields, io_err, parse_num, split_header, write_atomic, DataError, Result};
use crate::finetune::SegSample;
use crate::tensor::{Real, Tensor};

pub const VOLUME_MAGIC: &str = "SSLVOL1";

/// A stack of slices from one subject, optionally with per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    /// `[S,1,H,W]`.
    pub slices: Tensor<f32>,
    /// `S*H*W` class indices when present.
    pub labels: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(subject_id: impl Into<String>, slices: Tensor<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        let subject_id = subject_id.into();
        check_token("subject id", &subject_id)?;
        let [s, _, h, w] = slices
            .dims4()
            .ok_or_else(|| DataError::InvalidConfig(format!("volume must be [S,C,H,W], got {:?}", slices.shape())))?;
        if s == 0 {
            return Err(DataError::InvalidConfig("volume has no slices".into()));
        }
        if let Some(l) = &labels {
            if l.len() != s * h * w {
                return Err(DataError::InvalidConfig(format!("{} labels for {s}x{h}x{w} volume", l.len())));
            }
        }
        Ok(Self { subject_id, slices, labels })
    }

    pub fn num_slices(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.slices.shape()[2], self.slices.shape()[3])
    }

    /// Slice `i` as a `[1,C,H,W]` tensor.
    pub fn slice<T: Real>(&self, i: usize) -> Tensor<T> {
        self.slices.batch_item(i).cast()
    }

    pub fn images<T: Real>(&self) -> Vec<Tensor<T>> {
        (0..self.num_slices()).map(|i| self.slice(i)).collect()
    }

    /// Labeled slices; empty when the volume carries no labels.
    pub fn samples<T: Real>(&self) -> Vec<SegSample<T>> {
        let Some(labels) = &self.labels else { return Vec::new() };
        let (h, w) = self.dims();
        labels
            .chunks(h * w)
            .enumerate()
            .map(|(i, l)| SegSample { image: self.slice(i), labels: l.to_vec() })
            .collect()
    }
}

/// Per-volume min-max scaling to `[0,1]`. A constant volume maps to zeros.
pub fn normalize_unit(raw: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !raw.all_finite() {
        return Err(DataError::NonFinite("volume"));
    }
    let (lo, hi) = raw.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        log::warn!("normalize_unit: constant volume, returning zeros");
        return Ok(Tensor::zeros(raw.shape().to_vec()));
    }
    let range = hi - lo;
    Ok(raw.map(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let dims: Vec<String> = volume.slices.shape().iter().map(usize::to_string).collect();
    let header = format!(
        "{VOLUME_MAGIC} dims={} dtype=f32 subject={} labels={}\n",
        dims.join("x"),
        volume.subject_id,
        volume.labels.is_some() as u8
    );
    let mut bytes = header.into_bytes();
    for &v in volume.slices.data() {
        v.write_le(&mut bytes);
    }
    if let Some(l) = &volume.labels {
        bytes.extend_from_slice(l);
    }
    write_atomic(path, &bytes)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_volume(&bytes)
}

fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    let (line, payload) = split_header(bytes, VOLUME_MAGIC)?;
    let fields = header_fields(line)?;
    let dims: Vec<usize> =
        field(&fields, "dims")?.split('x').map(|d| parse_num("dims", d)).collect::<Result<_>>()?;
    if dims.len() != 4 {
        return Err(DataError::Header(format!("dims must have 4 axes, got {}", dims.len())));
    }
    let dtype = field(&fields, "dtype")?;
    if dtype != f32::DTYPE {
        return Err(DataError::Header(format!("unsupported dtype {dtype:?}")));
    }
    let subject = field(&fields, "subject")?.to_string();
    let has_labels = match field(&fields, "labels")? {
        "0" => false,
        "1" => true,
        other => return Err(DataError::Header(format!("labels flag {other:?} must be 0 or 1"))),
    };
    let numel = dims.iter().product::<usize>();
    let label_bytes = if has_labels { dims[0] * dims[2] * dims[3] } else { 0 };
    let expected = numel * f32::BYTES + label_bytes;
    if payload.len() < expected {
        return Err(DataError::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(DataError::SizeMismatch { expected, found: payload.len() });
    }
    let (floats, labels) = payload.split_at(numel * f32::BYTES);
    let data: Vec<f32> = floats.chunks_exact(f32::BYTES).map(f32::read_le).collect();
    let slices = Tensor::new(dims, data).map_err(|e| DataError::Header(e.to_string()))?;
    Volume::new(subject, slices, has_labels.then(|| labels.to_vec()))
}
