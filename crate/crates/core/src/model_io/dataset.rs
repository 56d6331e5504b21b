// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset containers (`.crpd`).
//!
//! A dataset is a CRPW file following a naming convention:
//!
//! | tensor                | dtype | content                                   |
//! |-----------------------|-------|-------------------------------------------|
//! | `sample/{i}`          | f32   | sample `i`, `i` dense from 0              |
//! | `labels`              | i32   | optional, one label per sample            |
//! | `class_names`         | u8    | optional, UTF-8, one name per line        |
//! | `provenance/sources`  | u8    | optional, UTF-8 source tags, one per line |
//! | `provenance/origin`   | i32   | optional `(N, 2)`: source index, original id |

use std::path::Path;

use crate::error::{CrpError, Result};
use crate::model_io::blob::{fingerprint, StoredTensor, TensorStore};
use crate::model_io::graph::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    samples: Vec<Tensor<f32>>,
    labels: Option<Vec<usize>>,
    class_names: Option<Vec<String>>,
    sources: Option<Vec<String>>,
    origin: Option<Vec<(usize, usize)>>,
}

impl DatasetContainer {
    pub fn new(samples: Vec<Tensor<f32>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let ds = Self {
            samples,
            labels,
            class_names: None,
            sources: None,
            origin: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| CrpError::parse("dataset has no samples"))?;
        if let Some(i) = self.samples.iter().position(|s| s.shape() != first.shape()) {
            return Err(CrpError::parse(format!(
                "sample/{i} has shape {:?}, expected {:?}",
                self.samples[i].shape(),
                first.shape()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.len() {
                return Err(CrpError::parse(format!(
                    "labels has length {} but the dataset has {} samples",
                    labels.len(),
                    self.samples.len()
                )));
            }
        }
        if let Some(origin) = &self.origin {
            let n_src = self.sources.as_ref().map_or(0, Vec::len);
            if origin.len() != self.samples.len() || origin.iter().any(|&(s, _)| s >= n_src) {
                return Err(CrpError::parse("provenance table does not match samples"));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&TensorStore::read(path)?)
    }

    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let mut samples = Vec::new();
        loop {
            let name = format!("sample/{}", samples.len());
            match store.get(&name) {
                Some(StoredTensor::F32(t)) => samples.push(t.clone()),
                Some(_) => return Err(CrpError::parse(format!("{name} must be f32"))),
                None => break,
            }
        }
        let stray = store.names().filter(|n| n.starts_with("sample/")).count();
        if stray != samples.len() {
            return Err(CrpError::parse("sample ids must be dense and start at 0"));
        }
        let labels = match store.get("labels") {
            None => None,
            Some(StoredTensor::I32(t)) => {
                if t.rank() != 1 {
                    return Err(CrpError::parse("labels must be rank 1"));
                }
                Some(
                    t.data()
                        .iter()
                        .map(|&v| usize::try_from(v).map_err(|_| CrpError::parse(format!("negative label {v}"))))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            Some(_) => return Err(CrpError::parse("labels must be an i32 tensor")),
        };
        let lines = |name: &str| -> Result<Option<Vec<String>>> {
            match store.get(name) {
                None => Ok(None),
                Some(StoredTensor::Bytes(b)) => {
                    let s = std::str::from_utf8(b).map_err(|_| CrpError::parse(format!("{name} is not UTF-8")))?;
                    Ok(Some(s.split('\n').map(str::to_string).collect()))
                }
                Some(_) => Err(CrpError::parse(format!("{name} must be a byte table"))),
            }
        };
        let class_names = lines("class_names")?;
        let sources = lines("provenance/sources")?;
        let origin = match store.get("provenance/origin") {
            None => None,
            Some(StoredTensor::I32(t)) if t.rank() == 2 && t.shape()[1] == 2 => Some(
                t.data()
                    .chunks(2)
                    .map(|c| (c[0].max(0) as usize, c[1].max(0) as usize))
                    .collect(),
            ),
            Some(_) => return Err(CrpError::parse("provenance/origin must be i32 (N, 2)")),
        };
        let ds = Self {
            samples,
            labels,
            class_names,
            sources,
            origin,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        for (i, s) in self.samples.iter().enumerate() {
            store.insert_f32(format!("sample/{i}"), s.clone());
        }
        if let Some(labels) = &self.labels {
            let data = labels.iter().map(|&l| l as i32).collect();
            store.insert(
                "labels",
                StoredTensor::I32(Tensor::new(vec![labels.len()], data).expect("labels")),
            );
        }
        if let Some(names) = &self.class_names {
            if !names.is_empty() {
                store.insert("class_names", StoredTensor::Bytes(names.join("\n").into_bytes()));
            }
        }
        if let (Some(sources), Some(origin)) = (&self.sources, &self.origin) {
            store.insert(
                "provenance/sources",
                StoredTensor::Bytes(sources.join("\n").into_bytes()),
            );
            let data = origin.iter().flat_map(|&(s, i)| [s as i32, i as i32]).collect();
            store.insert(
                "provenance/origin",
                StoredTensor::I32(Tensor::new(vec![origin.len(), 2], data).expect("origin")),
            );
        }
        store
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().write(path)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    pub fn sample(&self, id: usize) -> Result<&Tensor<f32>> {
        self.samples
            .get(id)
            .ok_or_else(|| CrpError::NotFound(format!("sample {id} (dataset has {})", self.len())))
    }

    pub fn samples(&self) -> &[Tensor<f32>] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, id: usize) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.get(id).copied())
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Source tag and original sample id of a merged dataset entry.
    pub fn provenance(&self, id: usize) -> Option<(&str, usize)> {
        let (src, orig) = *self.origin.as_ref()?.get(id)?;
        Some((self.sources.as_ref()?[src].as_str(), orig))
    }

    /// Concatenates datasets. Ids of the first part are unchanged; later parts
    /// are appended in order. Every sample keeps a provenance record.
    pub fn merge(parts: &[(&str, &DatasetContainer)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(CrpError::InvalidArgument("nothing to merge".into()));
        }
        let mut samples = Vec::new();
        let mut labels = Some(Vec::new());
        let mut sources: Vec<String> = Vec::new();
        let mut origin = Vec::new();
        for (tag, ds) in parts {
            for id in 0..ds.len() {
                // Nested merges keep the innermost provenance.
                let (src_tag, orig) = match ds.provenance(id) {
                    Some((t, o)) => (format!("{tag}/{t}"), o),
                    None => (tag.to_string(), id),
                };
                let src = match sources.iter().position(|s| *s == src_tag) {
                    Some(p) => p,
                    None => {
                        sources.push(src_tag);
                        sources.len() - 1
                    }
                };
                origin.push((src, orig));
                samples.push(ds.samples[id].clone());
            }
            match (&mut labels, ds.labels()) {
                (Some(all), Some(l)) => all.extend_from_slice(l),
                _ => labels = None,
            }
        }
        let ds = Self {
            samples,
            labels,
            class_names: parts[0].1.class_names.clone(),
            sources: Some(sources),
            origin: Some(origin),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks that samples fit the model input and labels fit its outputs.
    pub fn check_compatible(&self, graph: &ModelGraph) -> Result<()> {
        if self.sample_shape() != graph.input_shape() {
            return Err(CrpError::Shape(format!(
                "dataset samples have shape {:?}, model expects {:?}",
                self.sample_shape(),
                graph.input_shape()
            )));
        }
        if let Some(labels) = &self.labels {
            let n = graph.num_outputs();
            if let Some(bad) = labels.iter().find(|&&l| l >= n) {
                return Err(CrpError::parse(format!(
                    "label {bad} out of range for a model with {n} outputs"
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&[&self.to_store().encode().expect("dataset encodes")])
    }
}
