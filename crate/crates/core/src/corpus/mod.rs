//! Synthetic bilingual video–caption world with a noisy-channel translator.
//!
//! Each video belongs to one concept; its frames are a fixed linear image of
//! the concept's token distribution plus Gaussian noise, and its captions are
//! bags of tokens drawn from that concept. The translator is a token bijection
//! corrupted by substitutions, deletions and insertions at rate `ρ`.

mod io;

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::encoders::{FrameFeatureSequence, Language, TokenSequence};
use crate::error::{Error, Result};

pub use io::{load_corpus, save_corpus, Manifest, CORPUS_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub vocab: usize,
    pub concepts: usize,
    pub support: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames: usize,
    pub frame_dim: usize,
    pub captions_per_video: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    /// Channel noise used to build the training and validation captions.
    pub rho: f64,
    /// Channel noise for the translated test queries; `None` means `rho`.
    pub eval_rho: Option<f64>,
    pub visual_noise: f64,
    /// Channel passes from source to target caption. 1 is a single
    /// translation; 3 adds a round trip first (the noisier "++" variant).
    pub translation_passes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab: 200,
            concepts: 50,
            support: 10,
            min_len: 4,
            max_len: 12,
            frames: 8,
            frame_dim: 32,
            captions_per_video: 3,
            train_videos: 600,
            val_videos: 100,
            test_videos: 100,
            rho: 0.3,
            eval_rho: None,
            visual_noise: 0.1,
            translation_passes: 1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn eval_rho(&self) -> f64 {
        self.eval_rho.unwrap_or(self.rho)
    }

    /// Applies one configuration key; `Ok(false)` if the key is not a world key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::config::parse_value as p;
        match key {
            "vocab" => self.vocab = p(key, value)?,
            "concepts" => self.concepts = p(key, value)?,
            "support" => self.support = p(key, value)?,
            "min_len" => self.min_len = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "frames" => self.frames = p(key, value)?,
            "frame_dim" => self.frame_dim = p(key, value)?,
            "captions_per_video" => self.captions_per_video = p(key, value)?,
            "train_videos" => self.train_videos = p(key, value)?,
            "val_videos" => self.val_videos = p(key, value)?,
            "test_videos" => self.test_videos = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "eval_rho" => self.eval_rho = Some(p(key, value)?),
            "visual_noise" => self.visual_noise = p(key, value)?,
            "translation_passes" => self.translation_passes = p(key, value)?,
            "corpus_seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("rho", self.rho), ("eval_rho", self.eval_rho())] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is outside [0, 1]")));
            }
        }
        if !(self.visual_noise >= 0.0 && self.visual_noise.is_finite()) {
            return Err(Error::config("visual_noise", "must be finite and non-negative"));
        }
        for (key, v) in [
            ("vocab", self.vocab),
            ("concepts", self.concepts),
            ("support", self.support),
            ("min_len", self.min_len),
            ("frames", self.frames),
            ("frame_dim", self.frame_dim),
            ("captions_per_video", self.captions_per_video),
            ("train_videos", self.train_videos),
            ("val_videos", self.val_videos),
            ("test_videos", self.test_videos),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "needs at least 2 tokens for substitutions"));
        }
        if self.support > self.vocab {
            return Err(Error::config("support", "exceeds the vocabulary"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max_len", "is below min_len"));
        }
        if self.translation_passes % 2 == 0 {
            return Err(Error::config("translation_passes", "must be odd to end in the target language"));
        }
        Ok(())
    }
}

/// Independent deterministic stream of the master seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Token bijection between the two vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

/// Per-call counts of what the channel did, for corruption audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub tokens: usize,
    pub substituted: usize,
    pub deleted: usize,
    pub inserted: usize,
}

impl ChannelStats {
    fn absorb(&mut self, o: ChannelStats) {
        self.tokens += o.tokens;
        self.substituted += o.substituted;
        self.deleted += o.deleted;
        self.inserted += o.inserted;
    }
}

impl Channel {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (s, &t) in forward.iter().enumerate() {
            if t >= forward.len() || inverse[t] != usize::MAX {
                return Err(Error::Invalid("token map is not a bijection".into()));
            }
            inverse[t] = s;
        }
        Ok(Channel { forward, inverse })
    }

    pub fn random(vocab: usize, rng: &mut impl Rng) -> Self {
        let mut forward: Vec<usize> = (0..vocab).collect();
        forward.shuffle(rng);
        Channel::new(forward).expect("a shuffle is a bijection")
    }

    pub fn vocab(&self) -> usize {
        self.forward.len()
    }

    /// Bijection image of `token` from `from` into the other language.
    pub fn map(&self, token: usize, from: Language) -> usize {
        match from {
            Language::Source => self.forward[token],
            Language::Target => self.inverse[token],
        }
    }

    pub fn translate(&self, s: &TokenSequence, rho: f64, rng: &mut impl Rng) -> TokenSequence {
        self.translate_with_stats(s, rho, rng).0
    }

    /// One noisy pass into the other language. Substitutions never
    /// reproduce the bijection image.
    pub fn translate_with_stats(
        &self,
        s: &TokenSequence,
        rho: f64,
        rng: &mut impl Rng,
    ) -> (TokenSequence, ChannelStats) {
        let (seq, stats, _) = self.translate_traced(s, rho, rng);
        (seq, stats)
    }

    /// As [`Channel::translate_with_stats`], also returning the provenance of
    /// every output token: `Some((input position, unsubstituted))`, or `None`
    /// for insertions.
    pub fn translate_traced(
        &self,
        s: &TokenSequence,
        rho: f64,
        rng: &mut impl Rng,
    ) -> (TokenSequence, ChannelStats, Vec<Option<(usize, bool)>>) {
        let v = self.vocab();
        let mut stats = ChannelStats {
            tokens: s.ids.len(),
            ..Default::default()
        };
        let mut out = Vec::with_capacity(s.ids.len() + 2);
        let mut trace = Vec::with_capacity(s.ids.len() + 2);
        for (i, &tok) in s.ids.iter().enumerate() {
            let clean = self.map(tok, s.language);
            let mut emitted = clean;
            let substituted = rng.random::<f64>() < rho;
            if substituted {
                emitted = (clean + rng.random_range(1..v)) % v;
                stats.substituted += 1;
            }
            if rng.random::<f64>() < rho / 4.0 {
                stats.deleted += 1;
            } else {
                out.push(emitted);
                trace.push(Some((i, !substituted)));
            }
            if rng.random::<f64>() < rho / 4.0 {
                out.push(rng.random_range(0..v));
                trace.push(None);
                stats.inserted += 1;
            }
        }
        if out.is_empty() {
            out.push(self.map(s.ids[0], s.language));
            trace.push(Some((0, true)));
        }
        let seq = TokenSequence::new(s.language.other(), out).expect("nonempty by construction");
        (seq, stats, trace)
    }

    /// `passes` consecutive noisy applications with composed provenance.
    pub fn chain_traced(
        &self,
        s: &TokenSequence,
        passes: usize,
        rho: f64,
        rng: &mut impl Rng,
    ) -> (TokenSequence, ChannelStats, Vec<Option<(usize, bool)>>) {
        let mut cur = s.clone();
        let mut stats = ChannelStats::default();
        let mut trace: Vec<Option<(usize, bool)>> = (0..s.ids.len()).map(|i| Some((i, true))).collect();
        for _ in 0..passes {
            let (next, st, t) = self.translate_traced(&cur, rho, rng);
            trace = t
                .into_iter()
                .map(|o| o.and_then(|(j, c)| trace[j].map(|(i, c0)| (i, c0 && c))))
                .collect();
            cur = next;
            stats.absorb(st);
        }
        (cur, stats, trace)
    }

    fn chain(&self, s: &TokenSequence, passes: usize, rho: f64, rng: &mut impl Rng) -> (TokenSequence, ChannelStats) {
        let (seq, stats, _) = self.chain_traced(s, passes, rho, rng);
        (seq, stats)
    }

    /// Round trip `S → T → S` with independent noise per pass.
    pub fn back_translate(&self, s: &TokenSequence, rho: f64, rng: &mut impl Rng) -> Result<TokenSequence> {
        if s.language != Language::Source {
            return Err(Error::Invalid("back-translation starts from a source sentence".into()));
        }
        Ok(self.chain(s, 2, rho, rng).0)
    }

    /// `passes` noisy applications; must be even so the result is in the starting language.
    pub fn compound_translate(
        &self,
        s: &TokenSequence,
        passes: usize,
        rho: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenSequence> {
        if passes < 2 || passes % 2 == 1 {
            return Err(Error::Invalid(format!("compound translation needs an even pass count ≥ 2, got {passes}")));
        }
        Ok(self.chain(s, passes, rho, rng).0)
    }
}

/// Concept supports, the channel and the frame generator of one seed.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub channel: Channel,
    pub supports: Vec<Vec<usize>>,
    /// `G`, `frame_dim × vocab`, row-major.
    pub generator: Tensor,
}

impl World {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, 0);
        let channel = Channel::random(config.vocab, &mut rng);
        let supports = (0..config.concepts)
            .map(|_| {
                let mut s = rand::seq::index::sample(&mut rng, config.vocab, config.support).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let scale = 1.0 / (config.vocab as f64).sqrt();
        let g = (0..config.frame_dim * config.vocab)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(World {
            config: config.clone(),
            channel,
            supports,
            generator: Tensor::raw(vec![config.frame_dim, config.vocab], g),
        })
    }

    /// `G·w_k` where `w_k` is uniform over the concept's support.
    pub fn concept_mean(&self, concept: usize) -> Vec<f64> {
        let support = &self.supports[concept];
        let w = 1.0 / support.len() as f64;
        (0..self.config.frame_dim)
            .map(|r| support.iter().map(|&t| self.generator.get(r, t)).sum::<f64>() * w)
            .collect()
    }

    pub fn synthesize_frames(&self, video_id: &str, concept: usize, rng: &mut impl Rng) -> FrameFeatureSequence {
        let mean = self.concept_mean(concept);
        let sigma = self.config.visual_noise;
        let mut data = Vec::with_capacity(self.config.frames * mean.len());
        for _ in 0..self.config.frames {
            data.extend(mean.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)));
        }
        let frames = Tensor::raw(vec![self.config.frames, mean.len()], data);
        FrameFeatureSequence::new(video_id, frames).expect("valid frame matrix")
    }

    pub fn synthesize_caption(&self, concept: usize, rng: &mut impl Rng) -> TokenSequence {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let support = &self.supports[concept];
        let ids = (0..len).map(|_| support[rng.random_range(0..support.len())]).collect();
        TokenSequence::new(Language::Source, ids).expect("min_len ≥ 1")
    }

    /// `s^S → s^T` through `translation_passes` channel applications.
    pub fn pseudo_translate(&self, s: &TokenSequence, rng: &mut impl Rng) -> TokenSequence {
        self.channel.chain(s, self.config.translation_passes, self.config.rho, rng).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "val" => Some(Role::Val),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    /// Generating concept; unknown for ingested corpora.
    pub concept: Option<usize>,
    pub frames: FrameFeatureSequence,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.frames.video_id
    }
}

/// One caption of one video with its language variants.
///
/// Training and validation: `source` is `s^S`, `target` the noisy `s^T`,
/// `back` the back-translation `s^B`. Test: `target` is the clean query and
/// `source` its channel translation; `back` is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub caption_id: String,
    pub video: usize,
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub back: Option<TokenSequence>,
}

impl Instance {
    /// Source-language rendering of the target query used for score fusion.
    pub fn translated_query(&self, role: Role) -> &TokenSequence {
        match (role, &self.back) {
            (Role::Test, _) | (_, None) => &self.source,
            (_, Some(b)) => b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub role: Role,
    pub videos: Vec<Video>,
    pub instances: Vec<Instance>,
}

impl Split {
    pub fn video_of(&self, instance: usize) -> usize {
        self.instances[instance].video
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, role: Role) -> &Split {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }
}

fn build_split(world: &World, role: Role, count: usize, concept_offset: usize) -> Split {
    let cfg = &world.config;
    let mut rng = stream(cfg.seed, 1 + role as u64);
    let eval_rho = cfg.eval_rho();
    let mut videos = Vec::with_capacity(count);
    let mut instances = Vec::with_capacity(count * cfg.captions_per_video);
    for v in 0..count {
        let concept = (v + concept_offset) % cfg.concepts;
        let id = format!("{}{:04}", role.as_str(), v);
        videos.push(Video {
            concept: Some(concept),
            frames: world.synthesize_frames(&id, concept, &mut rng),
        });
        for c in 0..cfg.captions_per_video {
            let s = world.synthesize_caption(concept, &mut rng);
            let caption_id = format!("{id}c{c}");
            let inst = if role == Role::Test {
                let target = world.channel.chain(&s, 1, 0.0, &mut rng).0;
                let source = world.channel.translate(&target, eval_rho, &mut rng);
                Instance { caption_id, video: v, source, target, back: None }
            } else {
                let target = world.pseudo_translate(&s, &mut rng);
                let back = world.channel.translate(&target, cfg.rho, &mut rng);
                Instance { caption_id, video: v, source: s, target, back: Some(back) }
            };
            instances.push(inst);
        }
    }
    Split { role, videos, instances }
}

/// Train, validation and test splits of a freshly generated world.
pub fn build_dataset(config: &WorldConfig) -> Result<(World, Dataset)> {
    let world = World::generate(config)?;
    let train = build_split(&world, Role::Train, config.train_videos, 0);
    let val = build_split(&world, Role::Val, config.val_videos, 0);
    let test = build_split(&world, Role::Test, config.test_videos, 0);
    let manifest = Manifest::describe(config, [&train, &val, &test]);
    Ok((world, Dataset { manifest, train, val, test }))
}

/// Epoch-seeded minibatches of instance indices with at most one caption per
/// video in each batch. Conflicting instances are deferred to later batches;
/// a trailing batch smaller than 2 is dropped.
pub fn make_batches(split: &Split, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Invalid(format!("batch size {batch_size} is below 2")));
    }
    let mut order: Vec<usize> = (0..split.instances.len()).collect();
    order.shuffle(&mut stream(seed, 1000 + epoch as u64));
    let mut queue: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(i) = queue.pop_front() else { break };
            if seen.insert(split.video_of(i)) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            queue.push_front(i);
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests;
