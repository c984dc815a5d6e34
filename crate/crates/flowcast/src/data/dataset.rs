//! On-disk dataset format: `meta.json` + little-endian f32 `flow.bin`,
//! optional `labels.json` with planted regime labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::Tensor;

/// Recorded grid flows: `rows × cols` regions in row-major order, one
/// inflow/outflow pair per region per step.
#[derive(Debug, Clone)]
pub struct FlowDataset {
    pub rows: usize,
    pub cols: usize,
    pub interval_minutes: usize,
    /// `[S_total, N, 2]`, all values finite and non-negative.
    pub flow: Tensor,
}

impl FlowDataset {
    pub fn new(rows: usize, cols: usize, interval_minutes: usize, flow: Tensor) -> Self {
        assert_eq!(flow.shape().len(), 3);
        assert_eq!(flow.shape()[1], rows * cols, "flow N must equal rows*cols");
        assert_eq!(flow.shape()[2], 2);
        FlowDataset {
            rows,
            cols,
            interval_minutes,
            flow,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_steps(&self) -> usize {
        self.flow.shape()[0]
    }

    /// Steps per day implied by the recording interval.
    pub fn steps_per_day(&self) -> usize {
        (24 * 60) / self.interval_minutes
    }

    /// `[N, 2]` slice at one time step.
    pub fn step(&self, t: usize) -> Tensor {
        let n = self.num_regions();
        let start = t * n * 2;
        Tensor::new(vec![n, 2], self.flow.data()[start..start + n * 2].to_vec())
    }

    /// `[len, N, 2]` contiguous slice of steps `start..start+len`.
    pub fn steps(&self, start: usize, len: usize) -> Tensor {
        let n = self.num_regions();
        let lo = start * n * 2;
        let hi = (start + len) * n * 2;
        Tensor::new(vec![len, n, 2], self.flow.data()[lo..hi].to_vec())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    rows: usize,
    cols: usize,
    interval_minutes: usize,
    num_steps: usize,
    flow_dtype: String,
    layout: String,
}

pub fn save_dataset(
    dir: &Path,
    dataset: &FlowDataset,
    labels: Option<&[usize]>,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let meta = Meta {
        rows: dataset.rows,
        cols: dataset.cols,
        interval_minutes: dataset.interval_minutes,
        num_steps: dataset.num_steps(),
        flow_dtype: "f32le".to_string(),
        layout: "step,region,channel".to_string(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| DataError::io(&meta_path, e))?;
    let mut blob = Vec::with_capacity(dataset.flow.numel() * 4);
    for &v in dataset.flow.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let bin_path = dir.join("flow.bin");
    fs::write(&bin_path, blob).map_err(|e| DataError::io(&bin_path, e))?;
    if let Some(labels) = labels {
        let labels_path = dir.join("labels.json");
        fs::write(&labels_path, serde_json::to_vec(&labels)?)
            .map_err(|e| DataError::io(&labels_path, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<FlowDataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)?;
    if meta.rows == 0 || meta.cols == 0 {
        return Err(DataError::Meta(format!(
            "grid must be non-empty, got {}x{}",
            meta.rows, meta.cols
        )));
    }
    if meta.interval_minutes == 0 || (24 * 60) % meta.interval_minutes != 0 {
        return Err(DataError::Meta(format!(
            "interval_minutes {} must divide a day",
            meta.interval_minutes
        )));
    }
    if meta.flow_dtype != "f32le" {
        return Err(DataError::Meta(format!(
            "unsupported flow_dtype {:?}",
            meta.flow_dtype
        )));
    }
    if meta.layout != "step,region,channel" {
        return Err(DataError::Meta(format!("unsupported layout {:?}", meta.layout)));
    }
    let n = meta.rows * meta.cols;
    let expected = meta.num_steps * n * 2 * 4;
    let bin_path = dir.join("flow.bin");
    let blob = fs::read(&bin_path).map_err(|e| DataError::io(&bin_path, e))?;
    if blob.len() != expected {
        return Err(DataError::BlobLength {
            expected,
            actual: blob.len(),
        });
    }
    let mut data = Vec::with_capacity(meta.num_steps * n * 2);
    for (i, chunk) in blob.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(DataError::NonFinite { index: i });
        }
        if v < 0.0 {
            return Err(DataError::NegativeValue { index: i, value: v });
        }
        data.push(v);
    }
    Ok(FlowDataset::new(
        meta.rows,
        meta.cols,
        meta.interval_minutes,
        Tensor::new(vec![meta.num_steps, n, 2], data),
    ))
}

/// Planted per-region regime labels, when the dataset ships them.
pub fn load_labels(dir: &Path) -> Result<Option<Vec<usize>>, DataError> {
    let path = dir.join("labels.json");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dataset() -> FlowDataset {
        let data: Vec<f64> = (0..10 * 4 * 2).map(|i| (i % 7) as f64).collect();
        FlowDataset::new(2, 2, 30, Tensor::new(vec![10, 4, 2], data))
    }

    #[test]
    fn roundtrip_tiny() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(dir.path(), &ds, Some(&[0, 0, 1, 1])).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_regions(), 4);
        assert_eq!(loaded.num_steps(), 10);
        assert_eq!(loaded.flow.data(), ds.flow.data());
        assert_eq!(load_labels(dir.path()).unwrap().unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn truncated_blob_reports_lengths() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny_dataset(), None).unwrap();
        let bin = dir.path().join("flow.bin");
        let mut blob = std::fs::read(&bin).unwrap();
        blob.truncate(blob.len() - 4);
        std::fs::write(&bin, &blob).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::BlobLength { expected, actual }) => {
                assert_eq!(expected, 10 * 4 * 2 * 4);
                assert_eq!(actual, expected - 4);
            }
            other => panic!("expected BlobLength, got {other:?}"),
        }
    }

    #[test]
    fn missing_dir_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/nowhere")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn negative_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &tiny_dataset(), None).unwrap();
        let bin = dir.path().join("flow.bin");
        let mut blob = std::fs::read(&bin).unwrap();
        blob[0..4].copy_from_slice(&(-1.0_f32).to_le_bytes());
        std::fs::write(&bin, &blob).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::NegativeValue { index: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(
            rows in 1usize..4,
            cols in 1usize..4,
            steps in 1usize..12,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rows * cols;
            // values quantized through f32 so the on-disk format is lossless
            let data: Vec<f64> = (0..steps * n * 2)
                .map(|_| (rng.gen_range(0.0..500.0) as f32) as f64)
                .collect();
            let ds = FlowDataset::new(rows, cols, 30, Tensor::new(vec![steps, n, 2], data));
            let dir = tempfile::tempdir().unwrap();
            save_dataset(dir.path(), &ds, None).unwrap();
            let loaded = load_dataset(dir.path()).unwrap();
            prop_assert_eq!(loaded.flow.data(), ds.flow.data());
            prop_assert_eq!(loaded.rows, rows);
            prop_assert_eq!(loaded.interval_minutes, 30);
        }
    }
}
