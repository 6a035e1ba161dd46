//! Conversion quality in the model's own speaker space, plus a sweep over
//! sampling step counts.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::audio::{compute_mel, AudioClip, MelConfig};
use crate::error::{Error, Result};
use crate::factorize::SpeakerEmbedding;
use crate::model::Model;
use crate::pipeline::{Checkpoint, Manifest};
use crate::sampler::{ConversionRequest, Converter, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: Vec<usize>,
    pub seed: u64,
    /// Source clips converted per ordered speaker pair.
    pub sources_per_pair: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: vec![1, 2, 4, 6], seed: 0, sources_per_pair: 4 }
    }
}

/// One conversion of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub steps: usize,
    pub source: String,
    pub prompt: String,
    pub source_speaker: String,
    pub target_speaker: String,
    pub cos_target: Option<f64>,
    pub cos_source: Option<f64>,
    /// Against the source mel; only for same-speaker conversions.
    pub mel_l1: Option<f64>,
    pub error: Option<String>,
}

impl ConversionRecord {
    pub fn is_cross(&self) -> bool {
        self.source_speaker != self.target_speaker
    }

    pub fn margin(&self) -> Option<f64> {
        Some(self.cos_target? - self.cos_source?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub steps: usize,
    pub mel_l1: Option<f64>,
    pub self_secs: Option<f64>,
    pub cross_margin: Option<f64>,
    /// Fraction of cross-speaker conversions closer to the target centroid.
    pub cross_win_rate: Option<f64>,
    pub conversions: usize,
    pub failures: usize,
}

/// Headline values repeat the row of the last step count requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mel_l1: Option<f64>,
    pub self_secs: Option<f64>,
    pub cross_margin: Option<f64>,
    pub cross_win_rate: Option<f64>,
    pub rows: Vec<StepRow>,
    pub conversions: Vec<ConversionRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("report: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn row(&self, steps: usize) -> Option<&StepRow> {
        self.rows.iter().find(|r| r.steps == steps)
    }
}

struct Clip {
    name: String,
    audio: AudioClip,
    mel: ndarray::Array2<f64>,
    embedding: SpeakerEmbedding,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn centroid(clips: &[&Clip], exclude: &[&str]) -> Option<SpeakerEmbedding> {
    let kept: Vec<_> = clips.iter().filter(|c| !exclude.contains(&c.name.as_str())).collect();
    let first = kept.first()?;
    let mut acc = Array1::zeros(first.embedding.dim());
    for c in &kept {
        acc += &c.embedding.values;
    }
    Some(SpeakerEmbedding { values: acc / kept.len() as f64 })
}

/// Converts, for every ordered speaker pair and step count, up to
/// `sources_per_pair` source clips using a prompt clip of the target
/// speaker. Centroids exclude both the prompt and the source clip.
pub fn evaluate(manifest: &Manifest, ck: &Checkpoint, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.steps.is_empty() {
        return Err(Error::invalid("no step counts requested"));
    }
    for &s in &cfg.steps {
        SamplerConfig::new(s, cfg.seed)?;
    }
    let model = Model::new(ck.config.model)?;
    let mel_cfg = MelConfig::default();
    let converter = Converter::new(&model, &ck.params, mel_cfg)?;

    let mut by_speaker: BTreeMap<String, Vec<Clip>> = BTreeMap::new();
    for entry in &manifest.entries {
        let audio = match AudioClip::load_wav(&entry.path) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.path.display());
                continue;
            }
        };
        let mel = compute_mel(&audio, &mel_cfg)?.values;
        let embedding = converter.embed_mel(&mel)?;
        let name = entry.path.display().to_string();
        by_speaker.entry(entry.speaker.clone()).or_default().push(Clip { name, audio, mel, embedding });
    }
    if by_speaker.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two speakers"));
    }

    let mut records = Vec::new();
    let mut request_index = 0u64;
    for &steps in &cfg.steps {
        for (src_spk, src_clips) in &by_speaker {
            for (tgt_spk, tgt_clips) in &by_speaker {
                let same = src_spk == tgt_spk;
                for j in 0..cfg.sources_per_pair.min(src_clips.len()) {
                    let source = &src_clips[j];
                    let k = if same { (j + 1) % tgt_clips.len() } else { j % tgt_clips.len() };
                    let prompt = &tgt_clips[k];
                    let seed = cfg.seed.wrapping_add(request_index);
                    request_index += 1;
                    let mut rec = ConversionRecord {
                        steps,
                        source: source.name.clone(),
                        prompt: prompt.name.clone(),
                        source_speaker: src_spk.clone(),
                        target_speaker: tgt_spk.clone(),
                        cos_target: None,
                        cos_source: None,
                        mel_l1: None,
                        error: None,
                    };
                    if same && tgt_clips.len() < 2 {
                        rec.error = Some("speaker has a single clip; no distinct prompt".into());
                        records.push(rec);
                        continue;
                    }
                    let exclude = [source.name.as_str(), prompt.name.as_str()];
                    let tgt_refs: Vec<&Clip> = tgt_clips.iter().collect();
                    let src_refs: Vec<&Clip> = src_clips.iter().collect();
                    let (Some(tc), Some(sc)) = (centroid(&tgt_refs, &exclude), centroid(&src_refs, &exclude)) else {
                        rec.error = Some("no held-out clips left for a centroid".into());
                        records.push(rec);
                        continue;
                    };
                    let req = ConversionRequest { source: source.audio.clone(), target: prompt.audio.clone(), sampler: SamplerConfig::new(steps, seed)? };
                    match converter.convert(&req).and_then(|c| Ok((converter.embed_mel(&c.mel.values)?, c))) {
                        Ok((emb, conv)) => {
                            rec.cos_target = Some(emb.cosine(&tc));
                            rec.cos_source = Some(emb.cosine(&sc));
                            if same {
                                rec.mel_l1 = Some((&conv.mel.values - &source.mel).mapv(f64::abs).mean().unwrap_or(f64::NAN));
                            }
                        }
                        Err(e) => rec.error = Some(e.to_string()),
                    }
                    records.push(rec);
                }
            }
        }
    }

    let rows: Vec<StepRow> = cfg
        .steps
        .iter()
        .map(|&steps| {
            let rs: Vec<&ConversionRecord> = records.iter().filter(|r| r.steps == steps).collect();
            let cross: Vec<f64> = rs.iter().filter(|r| r.is_cross()).filter_map(|r| r.margin()).collect();
            StepRow {
                steps,
                mel_l1: mean(rs.iter().filter_map(|r| r.mel_l1)),
                self_secs: mean(rs.iter().filter_map(|r| r.cos_target)),
                cross_margin: mean(cross.iter().copied()),
                cross_win_rate: mean(cross.iter().map(|&m| if m > 0.0 { 1.0 } else { 0.0 })),
                conversions: rs.len(),
                failures: rs.iter().filter(|r| r.error.is_some()).count(),
            }
        })
        .collect();
    let last = rows.last().expect("at least one row").clone();
    Ok(EvalReport {
        mel_l1: last.mel_l1,
        self_secs: last.self_secs,
        cross_margin: last.cross_margin,
        cross_win_rate: last.cross_win_rate,
        rows,
        conversions: records,
    })
}
