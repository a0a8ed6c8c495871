use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature_file::{read_feature_file, write_feature_file, Modality};
use super::{Conversation, Split, Utterance};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

/// One JSON-lines record of a manifest. Feature paths are resolved relative
/// to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub audio: PathBuf,
    pub text: PathBuf,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    /// Sorted distinct labels seen across all splits.
    pub label_vocab: Vec<usize>,
}

impl Dataset {
    pub fn from_conversations(conversations: Vec<Conversation>) -> Self {
        let label_vocab = conversations
            .iter()
            .flat_map(|c| c.utterances.iter().map(|u| u.label))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Dataset {
            conversations,
            label_vocab,
        }
    }

    pub fn split(&self, split: Split) -> Vec<Conversation> {
        super::split_of(&self.conversations, split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.conversations.iter().filter(|c| c.split == split).count()
    }

    pub fn utterances(&self, split: Split) -> usize {
        self.conversations
            .iter()
            .filter(|c| c.split == split)
            .map(Conversation::len)
            .sum()
    }

    /// Smallest class count covering every label.
    pub fn num_classes(&self) -> usize {
        self.label_vocab.last().map_or(0, |&l| l + 1)
    }

    pub fn dim(&self) -> Option<usize> {
        self.conversations.first().and_then(Conversation::dim)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Write every conversation as a pair of feature files under `dir/features`
/// plus `dir/manifest.jsonl`, returning the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, conversations: &[Conversation]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut entries = Vec::with_capacity(conversations.len());
    for (i, conv) in conversations.iter().enumerate() {
        let d = conv
            .dim()
            .ok_or_else(|| Error::Validation(format!("conversation `{}` is empty", conv.conversation_id)))?;
        let mut paths = Vec::new();
        for m in Modality::BOTH {
            let data: Vec<f32> = conv
                .utterances
                .iter()
                .flat_map(|u| if m == Modality::Audio { &u.audio } else { &u.text }.iter().copied())
                .collect();
            let rel = PathBuf::from("features").join(format!("{i:05}.{}.bcaf", m.name()));
            write_feature_file(dir.join(&rel), m, &Tensor::new(vec![conv.len(), d], data)?)?;
            paths.push(rel);
        }
        entries.push(ManifestEntry {
            id: conv.conversation_id.clone(),
            split: conv.split,
            audio: paths[0].clone(),
            text: paths[1].clone(),
            labels: conv.labels(),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Parse a JSON-lines manifest and load every referenced feature file.
///
/// Conversation order follows line order. Feature files are read in parallel.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if entry.labels.is_empty() {
            return Err(Error::Validation(format!("conversation `{}` has no utterances", entry.id)));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Validation(format!("duplicate conversation id `{}`", entry.id)));
        }
        entries.push(entry);
    }

    let loaded = Exec::Parallel.map(&entries, |e| load_entry(base, e));
    let conversations = loaded.into_iter().collect::<Result<Vec<_>>>()?;

    if let Some(dim) = conversations.first().and_then(Conversation::dim) {
        if let Some(bad) = conversations.iter().find(|c| c.dim() != Some(dim)) {
            return Err(Error::Validation(format!(
                "conversation `{}` has feature dimension {:?}, expected {dim}",
                bad.conversation_id,
                bad.dim()
            )));
        }
    }
    Ok(Dataset::from_conversations(conversations))
}

fn load_entry(base: &Path, entry: &ManifestEntry) -> Result<Conversation> {
    let (audio_tag, audio) = read_feature_file(base.join(&entry.audio))?;
    let (text_tag, text) = read_feature_file(base.join(&entry.text))?;
    let id = &entry.id;
    if audio_tag != Modality::Audio || text_tag != Modality::Text {
        return Err(Error::Validation(format!("conversation `{id}`: modality tags do not match audio/text fields")));
    }
    let n = entry.labels.len();
    for (name, m) in [("audio", &audio), ("text", &text)] {
        if m.shape()[0] != n {
            return Err(Error::Validation(format!(
                "conversation `{id}`: manifest lists {n} labels but {name} file holds {} rows",
                m.shape()[0]
            )));
        }
    }
    if audio.shape()[1] != text.shape()[1] {
        return Err(Error::Validation(format!(
            "conversation `{id}`: audio dim {} != text dim {}",
            audio.shape()[1],
            text.shape()[1]
        )));
    }
    if !audio.is_finite() || !text.is_finite() {
        return Err(Error::Validation(format!("conversation `{id}`: non-finite feature values")));
    }
    let utterances = entry
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Utterance {
            utterance_id: format!("{id}#{i}"),
            audio: audio.row(i).to_vec(),
            text: text.row(i).to_vec(),
            label,
        })
        .collect();
    Ok(Conversation {
        conversation_id: id.clone(),
        split: entry.split,
        utterances,
    })
}
