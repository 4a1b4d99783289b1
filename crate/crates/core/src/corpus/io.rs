use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Instance, Role, Split, Video, WorldConfig};
use crate::diffmath::Tensor;
use crate::encoders::{FrameFeatureSequence, Language, TokenSequence};
use crate::error::{Error, Result};

pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub rho: f64,
    pub eval_rho: f64,
    pub visual_noise: f64,
    pub translation_passes: usize,
    pub frame_dim: usize,
    pub frames_per_video: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub concepts: usize,
    pub captions_per_video: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    pub test_instances: usize,
    /// Generating concept of every video, when known.
    #[serde(default)]
    pub video_concepts: BTreeMap<String, usize>,
}

impl Manifest {
    pub(crate) fn describe(config: &WorldConfig, splits: [&Split; 3]) -> Self {
        let video_concepts = splits
            .iter()
            .flat_map(|s| s.videos.iter())
            .filter_map(|v| v.concept.map(|c| (v.id().to_string(), c)))
            .collect();
        Manifest {
            version: CORPUS_VERSION,
            seed: config.seed,
            rho: config.rho,
            eval_rho: config.eval_rho(),
            visual_noise: config.visual_noise,
            translation_passes: config.translation_passes,
            frame_dim: config.frame_dim,
            frames_per_video: config.frames,
            src_vocab: config.vocab,
            tgt_vocab: config.vocab,
            concepts: config.concepts,
            captions_per_video: config.captions_per_video,
            train_videos: splits[0].videos.len(),
            val_videos: splits[1].videos.len(),
            test_videos: splits[2].videos.len(),
            train_instances: splits[0].instances.len(),
            val_instances: splits[1].instances.len(),
            test_instances: splits[2].instances.len(),
            video_concepts,
        }
    }
}

fn lang_tag(l: Language) -> &'static str {
    match l {
        Language::Source => "src",
        Language::Target => "tgt",
    }
}

fn write(path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

fn ids_field(s: &TokenSequence) -> String {
    let mut out = String::with_capacity(s.ids.len() * 4);
    for (i, id) in s.ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{id}").unwrap();
    }
    out
}

pub fn save_corpus(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&data.manifest)?;
    write(dir.join("manifest.json"), &(manifest + "\n"))?;

    let mut features = String::new();
    let mut captions = String::new();
    for split in [&data.train, &data.val, &data.test] {
        for v in &split.videos {
            let m = &v.frames.frames;
            for r in 0..m.rows() {
                write!(features, "{}\t{r}\t", v.id()).unwrap();
                for (c, x) in m.row(r).iter().enumerate() {
                    if c > 0 {
                        features.push(' ');
                    }
                    write!(features, "{x:.16e}").unwrap();
                }
                features.push('\n');
            }
        }
        let role = split.role.as_str();
        for inst in &split.instances {
            let vid = split.videos[inst.video].id();
            let mut line = |lang: &str, s: &TokenSequence| {
                writeln!(captions, "{}\t{vid}\t{lang}\t{role}\t{}", inst.caption_id, ids_field(s)).unwrap();
            };
            line(lang_tag(inst.source.language), &inst.source);
            line(lang_tag(inst.target.language), &inst.target);
            if let Some(b) = &inst.back {
                line("back", b);
            }
        }
    }
    write(dir.join("features.tsv"), &features)?;
    write(dir.join("captions.tsv"), &captions)?;
    for (file, prefix, n) in [
        ("vocab_src.tsv", 's', data.manifest.src_vocab),
        ("vocab_tgt.tsv", 't', data.manifest.tgt_vocab),
    ] {
        let body: String = (0..n).map(|i| format!("{i}\t{prefix}{i}\n")).collect();
        write(dir.join(file), &body)?;
    }
    Ok(())
}

fn read(path: PathBuf) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

struct LineErr<'a> {
    path: &'a Path,
    line: usize,
}

impl LineErr<'_> {
    fn at(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }
}

fn count_vocab(path: PathBuf) -> Result<usize> {
    let text = read(path.clone())?;
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let at = LineErr { path: &path, line: i + 1 };
        let id = line
            .split('\t')
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| at.at("expected `id<TAB>surface`"))?;
        if id != n {
            return Err(at.at(format!("vocabulary ids must be consecutive; expected {n}")));
        }
        n += 1;
    }
    Ok(n)
}

pub fn load_corpus(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read(manifest_path)?)?;
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Version(format!("corpus version {} (expected {CORPUS_VERSION})", manifest.version)));
    }
    for (file, expect) in [("vocab_src.tsv", manifest.src_vocab), ("vocab_tgt.tsv", manifest.tgt_vocab)] {
        let n = count_vocab(dir.join(file))?;
        if n != expect {
            return Err(Error::Invalid(format!("{file} has {n} entries, manifest says {expect}")));
        }
    }

    // features: frames grouped by video in file order
    let fpath = dir.join("features.tsv");
    let text = read(fpath.clone())?;
    let mut order: Vec<String> = Vec::new();
    let mut frames: HashMap<String, Vec<f64>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let at = LineErr { path: &fpath, line: i + 1 };
        let mut fields = line.split('\t');
        let (Some(vid), Some(idx), Some(values), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(at.at("expected 3 tab-separated fields"));
        };
        let idx: usize = idx.parse().map_err(|_| at.at(format!("bad frame index `{idx}`")))?;
        let row: Vec<f64> = values
            .split(' ')
            .map(|x| x.parse::<f64>().map_err(|_| at.at(format!("bad decimal `{x}`"))))
            .collect::<Result<_>>()?;
        if row.len() != manifest.frame_dim {
            return Err(at.at(format!("{} values, manifest frame_dim is {}", row.len(), manifest.frame_dim)));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(at.at("non-finite feature value"));
        }
        let buf = frames.entry(vid.to_string()).or_insert_with(|| {
            order.push(vid.to_string());
            Vec::new()
        });
        if idx * manifest.frame_dim != buf.len() {
            return Err(at.at(format!("frame {idx} of `{vid}` out of order")));
        }
        buf.extend(row);
    }

    // captions: up to three lines per caption id
    let cpath = dir.join("captions.tsv");
    let text = read(cpath.clone())?;
    struct Draft {
        video: String,
        role: Role,
        source: Option<TokenSequence>,
        target: Option<TokenSequence>,
        back: Option<TokenSequence>,
        line: usize,
    }
    let mut drafts: Vec<(String, Draft)> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let at = LineErr { path: &cpath, line: i + 1 };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(at.at("expected 5 tab-separated fields"));
        }
        let role = Role::parse(f[3]).ok_or_else(|| at.at(format!("unknown role `{}`", f[3])))?;
        let (language, vocab) = match f[2] {
            "src" | "back" => (Language::Source, manifest.src_vocab),
            "tgt" => (Language::Target, manifest.tgt_vocab),
            other => return Err(at.at(format!("unknown language `{other}`"))),
        };
        let ids: Vec<usize> = f[4]
            .split(' ')
            .map(|x| match x.parse::<usize>() {
                Ok(id) if id < vocab => Ok(id),
                _ => Err(at.at(format!("bad token id `{x}`"))),
            })
            .collect::<Result<_>>()?;
        let seq = TokenSequence::new(language, ids).map_err(|e| at.at(e.to_string()))?;
        if !frames.contains_key(f[1]) {
            return Err(at.at(format!("video `{}` has no features", f[1])));
        }
        let k = *by_id.entry(f[0].to_string()).or_insert_with(|| {
            drafts.push((
                f[0].to_string(),
                Draft { video: f[1].to_string(), role, source: None, target: None, back: None, line: i + 1 },
            ));
            drafts.len() - 1
        });
        let d = &mut drafts[k].1;
        if d.video != f[1] || d.role != role {
            return Err(at.at(format!("caption `{}` changes video or role", f[0])));
        }
        let slot = match f[2] {
            "src" => &mut d.source,
            "tgt" => &mut d.target,
            _ => &mut d.back,
        };
        if slot.replace(seq).is_some() {
            return Err(at.at(format!("duplicate `{}` line for caption `{}`", f[2], f[0])));
        }
    }

    let mut splits: BTreeMap<Role, Split> = BTreeMap::new();
    let mut video_role: HashMap<&str, Role> = HashMap::new();
    for (_, d) in &drafts {
        if let Some(prev) = video_role.insert(d.video.as_str(), d.role) {
            if prev != d.role {
                return Err(LineErr { path: &cpath, line: d.line }.at(format!("video `{}` appears in two roles", d.video)));
            }
        }
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    for vid in &order {
        let Some(&role) = video_role.get(vid.as_str()) else {
            return Err(Error::Invalid(format!("video `{vid}` has no captions")));
        };
        let split = splits.entry(role).or_insert_with(|| Split { role, videos: Vec::new(), instances: Vec::new() });
        let data = frames.remove(vid).expect("collected above");
        let n = data.len() / manifest.frame_dim;
        let t = Tensor::new(vec![n, manifest.frame_dim], data)?;
        index.insert(vid.as_str(), split.videos.len());
        split.videos.push(Video {
            concept: manifest.video_concepts.get(vid).copied(),
            frames: FrameFeatureSequence::new(vid.clone(), t)?,
        });
    }
    for (caption_id, d) in drafts {
        let at = LineErr { path: &cpath, line: d.line };
        let (Some(source), Some(target)) = (d.source, d.target) else {
            return Err(at.at(format!("caption `{caption_id}` lacks a src or tgt line")));
        };
        if d.role != Role::Test && d.back.is_none() {
            return Err(at.at(format!("{} caption `{caption_id}` lacks a back line", d.role.as_str())));
        }
        let split = splits.get_mut(&d.role).expect("video registered");
        split.instances.push(Instance {
            caption_id,
            video: index[d.video.as_str()],
            source,
            target,
            back: d.back,
        });
    }
    let mut take = |role: Role| {
        splits.remove(&role).ok_or_else(|| Error::Invalid(format!("corpus has no {} split", role.as_str())))
    };
    Ok(Dataset {
        train: take(Role::Train)?,
        val: take(Role::Val)?,
        test: take(Role::Test)?,
        manifest,
    })
}
