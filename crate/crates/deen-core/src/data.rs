//! Sample records and the identity-indexed training view of a dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DeenError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Vis,
    Ir,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Vis => "VIS",
            Modality::Ir => "IR",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "VIS" => Ok(Modality::Vis),
            "IR" => Ok(Modality::Ir),
            other => Err(DeenError::Data(format!("unknown modality {other:?}"))),
        }
    }

    pub fn opposite(&self) -> Modality {
        match self {
            Modality::Vis => Modality::Ir,
            Modality::Ir => Modality::Vis,
        }
    }
}

/// One labeled image.
#[derive(Clone)]
pub struct SampleRecord {
    pub image: Tensor,
    pub identity: usize,
    pub modality: Modality,
    pub camera: usize,
}

/// Per-identity lists of VIS and IR samples plus the identity -> class-index
/// map used by the classifier head.
pub struct DatasetIndex {
    /// identity -> (VIS sample indices, IR sample indices) into `records`
    pub by_identity: BTreeMap<usize, (Vec<usize>, Vec<usize>)>,
    pub records: Vec<SampleRecord>,
    /// identity -> contiguous class index
    pub class_of_identity: BTreeMap<usize, usize>,
}

impl DatasetIndex {
    /// Build the training index; every identity must have at least one sample
    /// in each modality.
    pub fn build(records: Vec<SampleRecord>) -> Result<DatasetIndex> {
        let mut by_identity: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let entry = by_identity.entry(r.identity).or_default();
            match r.modality {
                Modality::Vis => entry.0.push(i),
                Modality::Ir => entry.1.push(i),
            }
        }
        for (id, (vis, ir)) in &by_identity {
            if vis.is_empty() || ir.is_empty() {
                return Err(DeenError::Data(format!(
                    "identity {id} lacks samples in one modality ({} VIS, {} IR)",
                    vis.len(),
                    ir.len()
                )));
            }
        }
        let class_of_identity = by_identity
            .keys()
            .enumerate()
            .map(|(c, &id)| (id, c))
            .collect();
        Ok(DatasetIndex {
            by_identity,
            records,
            class_of_identity,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn num_samples(&self) -> usize {
        self.records.len()
    }
}
