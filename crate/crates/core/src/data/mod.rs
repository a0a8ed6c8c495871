//! Utterance-level bimodal data: feature files, manifests, batching and a
//! synthetic generator.

mod batch;
mod feature_file;
mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

pub use batch::{batch_conversations, Batch, LABEL_PAD};
pub use feature_file::{read_feature_file, write_feature_file, Modality, FEATURE_HEADER_LEN, FEATURE_MAGIC};
pub use manifest::{load_manifest, write_dataset, write_manifest, Dataset, ManifestEntry};
pub use synth::{make_synthetic_dataset, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub audio: Vec<f32>,
    pub text: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub conversation_id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Feature dimension, taken from the first utterance.
    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.audio.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

/// Conversations of one split, in input order.
pub fn split_of(conversations: &[Conversation], split: Split) -> Vec<Conversation> {
    conversations.iter().filter(|c| c.split == split).cloned().collect()
}
