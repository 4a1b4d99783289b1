//! Common-space scoring, ranking and retrieval metrics.
//!
//! Rankings are 0-based item indices in descending score order, ties broken
//! by ascending index. Ranks reported by metrics are 1-based.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::corpus::Split;
use crate::diffmath::{Tape, Tensor};
use crate::encoders::{ModelParams, TokenSequence};
use crate::error::{Error, Result};

/// Token-count bins for per-length breakdowns.
pub const LENGTH_BUCKETS: [(usize, usize); 4] = [(4, 5), (6, 7), (8, 9), (10, 12)];

const ENCODE_CHUNK: usize = 64;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// `β·cos(v̂, ĉ^T) + (1 − β)·cos(v̂, ĉ^S)`.
pub fn fuse_score(video: &[f64], target: &[f64], source: &[f64], beta: f64) -> f64 {
    beta * cosine(video, target) + (1.0 - beta) * cosine(video, source)
}

pub fn rank_items(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// 1-based position of each relevant item, ascending.
fn relevant_positions(ranking: &[usize], relevant: &[usize]) -> Result<Vec<usize>> {
    if relevant.is_empty() {
        return Err(Error::Invalid("query without relevant items".into()));
    }
    let mut pos: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(r, _)| r + 1)
        .collect();
    if pos.len() != relevant.len() {
        return Err(Error::Invalid("relevant item missing from the ranking".into()));
    }
    pos.sort_unstable();
    Ok(pos)
}

/// Rank of the best-ranked relevant item of every query.
pub fn first_relevant_ranks(rankings: &[Vec<usize>], relevance: &[Vec<usize>]) -> Result<Vec<usize>> {
    if rankings.len() != relevance.len() {
        return Err(Error::Shape(format!("{} rankings for {} relevance sets", rankings.len(), relevance.len())));
    }
    if rankings.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    rankings
        .iter()
        .zip(relevance)
        .map(|(r, rel)| relevant_positions(r, rel).map(|p| p[0]))
        .collect()
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

fn median_from_ranks(ranks: &[usize]) -> f64 {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    }
}

pub fn recall_at_k(rankings: &[Vec<usize>], relevance: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    Ok(recall_from_ranks(&first_relevant_ranks(rankings, relevance)?, k))
}

pub fn median_rank(rankings: &[Vec<usize>], relevance: &[Vec<usize>]) -> Result<f64> {
    Ok(median_from_ranks(&first_relevant_ranks(rankings, relevance)?))
}

pub fn average_precision(ranking: &[usize], relevant: &[usize]) -> Result<f64> {
    let pos = relevant_positions(ranking, relevant)?;
    let total: f64 = pos.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum();
    Ok(total / relevant.len() as f64)
}

pub fn mean_average_precision(rankings: &[Vec<usize>], relevance: &[Vec<usize>]) -> Result<f64> {
    if rankings.len() != relevance.len() || rankings.is_empty() {
        return Err(Error::Invalid("mAP needs one relevance set per query".into()));
    }
    let mut total = 0.0;
    for (r, rel) in rankings.iter().zip(relevance) {
        total += average_precision(r, rel)?;
    }
    Ok(100.0 * total / rankings.len() as f64)
}

/// Compensated (Neumaier) sum, so that printed two-decimal recalls add up to
/// the decimal their sum reads as.
pub fn sum_recalls(recalls: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &x in recalls {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            carry += (sum - t) + x;
        } else {
            carry += (x - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub map: f64,
}

impl DirectionMetrics {
    pub fn compute(rankings: &[Vec<usize>], relevance: &[Vec<usize>]) -> Result<Self> {
        let ranks = first_relevant_ranks(rankings, relevance)?;
        Ok(DirectionMetrics {
            r1: recall_from_ranks(&ranks, 1),
            r5: recall_from_ranks(&ranks, 5),
            r10: recall_from_ranks(&ranks, 10),
            medr: median_from_ranks(&ranks),
            map: mean_average_precision(rankings, relevance)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub queries: usize,
    /// t2v R@5 over the bucket's queries; 0 when the bucket is empty.
    pub r5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub t2v: DirectionMetrics,
    pub v2t: DirectionMetrics,
    pub sumr: f64,
    pub buckets: Option<Vec<LengthBucket>>,
    pub t2t_map: Option<f64>,
}

impl MetricsReport {
    pub fn new(t2v: DirectionMetrics, v2t: DirectionMetrics) -> Self {
        let sumr = sum_recalls(&[t2v.r1, t2v.r5, t2v.r10, v2t.r1, v2t.r5, v2t.r10]);
        MetricsReport { t2v, v2t, sumr, buckets: None, t2t_map: None }
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (dir, d) in [("t2v", &self.t2v), ("v2t", &self.v2t)] {
            m.insert(format!("{dir}.r1"), json!(d.r1));
            m.insert(format!("{dir}.r5"), json!(d.r5));
            m.insert(format!("{dir}.r10"), json!(d.r10));
            m.insert(format!("{dir}.medr"), json!(d.medr));
            m.insert(format!("{dir}.map"), json!(d.map));
        }
        m.insert("sumr".into(), json!(self.sumr));
        if let Some(b) = &self.buckets {
            m.insert("buckets".into(), serde_json::to_value(b).expect("plain data"));
        }
        if let Some(t) = self.t2t_map {
            m.insert("t2t.map".into(), json!(t));
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let num = |k: &str| {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Invalid(format!("metrics report lacks `{k}`")))
        };
        let dir = |d: &str| -> Result<DirectionMetrics> {
            Ok(DirectionMetrics {
                r1: num(&format!("{d}.r1"))?,
                r5: num(&format!("{d}.r5"))?,
                r10: num(&format!("{d}.r10"))?,
                medr: num(&format!("{d}.medr"))?,
                map: num(&format!("{d}.map"))?,
            })
        };
        let mut r = MetricsReport::new(dir("t2v")?, dir("v2t")?);
        r.sumr = num("sumr")?;
        if let Some(b) = v.get("buckets") {
            r.buckets = Some(serde_json::from_value(b.clone())?);
        }
        r.t2t_map = v.get("t2t.map").and_then(Value::as_f64);
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum V2tFusion {
    #[default]
    Fused,
    TargetOnly,
}

/// Encoded evaluation split: one row per video and per caption.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub video_ids: Vec<String>,
    pub videos: Tensor,
    pub caption_ids: Vec<String>,
    /// Video index of every caption.
    pub caption_video: Vec<usize>,
    /// Token count of every target-language query.
    pub query_lengths: Vec<usize>,
    /// `ĉ^T` of the target-language queries.
    pub target: Tensor,
    /// `ĉ^S` of their source-language translations.
    pub source: Option<Tensor>,
}

fn normalized(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn cosine_table(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (a, b) = (normalized(a), normalized(b));
    a.iter()
        .map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

impl EmbeddingIndex {
    pub fn validate(&self) -> Result<()> {
        let n = self.caption_ids.len();
        let ok = self.videos.rows() == self.video_ids.len()
            && self.target.rows() == n
            && self.caption_video.len() == n
            && self.query_lengths.len() == n
            && self.source.as_ref().is_none_or(|s| s.rows() == n)
            && self.caption_video.iter().all(|&v| v < self.video_ids.len());
        if !ok {
            return Err(Error::Shape("embedding index tables disagree in length".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.video_ids.iter().chain(&self.caption_ids).all(|id| seen.insert(id.as_str())) {
            return Err(Error::Invalid("duplicate id in embedding index".into()));
        }
        Ok(())
    }

    /// Caption × video score table: fused when `beta < 1`.
    pub fn text_video_scores(&self, beta: f64) -> Result<Vec<Vec<f64>>> {
        let mut t = cosine_table(&self.target, &self.videos);
        if beta < 1.0 {
            let source = self
                .source
                .as_ref()
                .ok_or_else(|| Error::Invalid("fusion with β < 1 needs translated queries".into()))?;
            let s = cosine_table(source, &self.videos);
            for (tr, sr) in t.iter_mut().zip(&s) {
                for (x, y) in tr.iter_mut().zip(sr) {
                    *x = beta * *x + (1.0 - beta) * y;
                }
            }
        }
        Ok(t)
    }

    pub fn evaluate(&self, beta: f64, v2t: V2tFusion, group_by_length: bool) -> Result<MetricsReport> {
        self.validate()?;
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", format!("{beta} is outside [0, 1]")));
        }
        let fused = self.text_video_scores(beta)?;
        let t2v_rank: Vec<Vec<usize>> = fused.iter().map(|s| rank_items(s)).collect();
        let t2v_rel: Vec<Vec<usize>> = self.caption_video.iter().map(|&v| vec![v]).collect();
        let t2v = DirectionMetrics::compute(&t2v_rank, &t2v_rel)?;

        let v2t_scores = match v2t {
            V2tFusion::Fused => fused,
            V2tFusion::TargetOnly => self.text_video_scores(1.0)?,
        };
        let nv = self.video_ids.len();
        let mut v2t_rel = vec![Vec::new(); nv];
        for (c, &v) in self.caption_video.iter().enumerate() {
            v2t_rel[v].push(c);
        }
        let keep: Vec<usize> = (0..nv).filter(|&v| !v2t_rel[v].is_empty()).collect();
        let v2t_rank: Vec<Vec<usize>> = keep
            .iter()
            .map(|&v| rank_items(&v2t_scores.iter().map(|row| row[v]).collect::<Vec<_>>()))
            .collect();
        let v2t_rel: Vec<Vec<usize>> = keep.iter().map(|&v| v2t_rel[v].clone()).collect();
        let v2t = DirectionMetrics::compute(&v2t_rank, &v2t_rel)?;

        let mut report = MetricsReport::new(t2v, v2t);
        if group_by_length {
            let ranks = first_relevant_ranks(&t2v_rank, &t2v_rel)?;
            report.buckets = Some(
                LENGTH_BUCKETS
                    .iter()
                    .map(|&(lo, hi)| {
                        let r: Vec<usize> = ranks
                            .iter()
                            .zip(&self.query_lengths)
                            .filter(|(_, &l)| (lo..=hi).contains(&l))
                            .map(|(&r, _)| r)
                            .collect();
                        LengthBucket {
                            min_len: lo,
                            max_len: hi,
                            queries: r.len(),
                            r5: if r.is_empty() { 0.0 } else { recall_from_ranks(&r, 5) },
                        }
                    })
                    .collect(),
            );
        }
        Ok(report)
    }

    /// Target-language queries retrieving among the translated source
    /// sentences; each query's own translation is its only relevant item.
    pub fn text_to_text_map(&self) -> Result<f64> {
        let source = self
            .source
            .as_ref()
            .ok_or_else(|| Error::Invalid("text-to-text retrieval needs translated sentences".into()))?;
        let table = cosine_table(&self.target, source);
        let rankings: Vec<Vec<usize>> = table.iter().map(|s| rank_items(s)).collect();
        let relevance: Vec<Vec<usize>> = (0..rankings.len()).map(|i| vec![i]).collect();
        mean_average_precision(&rankings, &relevance)
    }

    /// TSV of the top `k` videos per caption query: `query_id  rank  item_id  score`.
    pub fn ranking_dump(&self, beta: f64, k: usize) -> Result<String> {
        let scores = self.text_video_scores(beta)?;
        let mut out = String::new();
        for (q, s) in scores.iter().enumerate() {
            for (r, &v) in rank_items(s).iter().take(k).enumerate() {
                writeln!(out, "{}\t{}\t{}\t{:.9}", self.caption_ids[q], r + 1, self.video_ids[v], s[v]).unwrap();
            }
        }
        Ok(out)
    }
}

/// `k` distinct indices below `n` in increasing order, drawn with `seed`.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

impl EmbeddingIndex {
    /// TSV rows `kind  video_id  caption_id  values…` for the given videos:
    /// the video, then `src` and `tgt` rows for each of its captions.
    /// Values print in shortest round-trip form.
    pub fn embedding_dump(&self, videos: &[usize]) -> Result<String> {
        let source = self
            .source
            .as_ref()
            .ok_or_else(|| Error::Invalid("embedding dump needs translated sentences".into()))?;
        let mut out = String::new();
        let mut row = |kind: &str, video: usize, caption: Option<usize>, values: &[f64]| {
            let cap = caption.map_or("-", |c| self.caption_ids[c].as_str());
            write!(out, "{kind}\t{}\t{cap}", self.video_ids[video]).unwrap();
            for x in values {
                write!(out, "\t{x}").unwrap();
            }
            out.push('\n');
        };
        for &v in videos {
            if v >= self.video_ids.len() {
                return Err(Error::Invalid(format!("video index {v} out of range")));
            }
            row("video", v, None, self.videos.row(v));
            for c in (0..self.caption_ids.len()).filter(|&c| self.caption_video[c] == v) {
                row("src", v, Some(c), source.row(c));
                row("tgt", v, Some(c), self.target.row(c));
            }
        }
        Ok(out)
    }
}

/// Common-space embeddings of token sequences, in input order.
pub fn encode_texts(model: &ModelParams, seqs: &[&TokenSequence]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(seqs.len() * model.model.dims.common_dim);
    let mut tape = Tape::new();
    for chunk in seqs.chunks(ENCODE_CHUNK) {
        tape.reset();
        let p = model.bind_frozen(&mut tape);
        let batch = model.model.text.embed_batch(&mut tape, &p, chunk)?;
        let c = model.model.text.encode(&mut tape, &p, &batch)?;
        rows.extend_from_slice(tape.value(c).data());
    }
    Tensor::new(vec![seqs.len(), model.model.dims.common_dim], rows)
}

pub fn encode_videos(model: &ModelParams, split: &Split) -> Result<Tensor> {
    let d = model.model.dims.common_dim;
    let mut rows = Vec::with_capacity(split.videos.len() * d);
    let mut tape = Tape::new();
    for chunk in split.videos.chunks(ENCODE_CHUNK) {
        tape.reset();
        let p = model.bind_frozen(&mut tape);
        let frames: Vec<_> = chunk.iter().map(|v| &v.frames).collect();
        let batch = model.model.visual.stack_frames(&mut tape, &frames)?;
        let v = model.model.visual.encode(&mut tape, &p, &batch)?;
        rows.extend_from_slice(tape.value(v).data());
    }
    Tensor::new(vec![split.videos.len(), d], rows)
}

/// Encodes a split for evaluation. Translated queries are encoded only when
/// `with_translations` is set.
pub fn build_index(model: &ModelParams, split: &Split, with_translations: bool) -> Result<EmbeddingIndex> {
    if split.instances.is_empty() {
        return Err(Error::Invalid(format!("{} split has no captions", split.role.as_str())));
    }
    let targets: Vec<&TokenSequence> = split.instances.iter().map(|i| &i.target).collect();
    let source = if with_translations {
        let s: Vec<&TokenSequence> = split.instances.iter().map(|i| i.translated_query(split.role)).collect();
        Some(encode_texts(model, &s)?)
    } else {
        None
    };
    let index = EmbeddingIndex {
        video_ids: split.videos.iter().map(|v| v.id().to_string()).collect(),
        videos: encode_videos(model, split)?,
        caption_ids: split.instances.iter().map(|i| i.caption_id.clone()).collect(),
        caption_video: split.instances.iter().map(|i| i.video).collect(),
        query_lengths: targets.iter().map(|t| t.len()).collect(),
        target: encode_texts(model, &targets)?,
        source,
    };
    index.validate()?;
    Ok(index)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub beta: f64,
    pub v2t_fusion: V2tFusion,
    pub group_by_length: bool,
    pub text_to_text: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { beta: 0.8, v2t_fusion: V2tFusion::Fused, group_by_length: false, text_to_text: false }
    }
}

pub fn evaluate(model: &ModelParams, split: &Split, opts: &EvalOptions) -> Result<MetricsReport> {
    let index = build_index(model, split, opts.beta < 1.0 || opts.text_to_text)?;
    let mut report = index.evaluate(opts.beta, opts.v2t_fusion, opts.group_by_length)?;
    if opts.text_to_text {
        report.t2t_map = Some(index.text_to_text_map()?);
    }
    Ok(report)
}
