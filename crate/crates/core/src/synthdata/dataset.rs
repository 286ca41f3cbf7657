use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{Scene, SceneSpec, CHANNELS, CLASSES};
use crate::error::{Error, Result};
use crate::model::VideoClip;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSTD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Site,
    Synthetic,
    OutOfFederation,
}

impl DatasetKind {
    fn tag(self) -> u8 {
        match self {
            DatasetKind::Site => 0,
            DatasetKind::Synthetic => 1,
            DatasetKind::OutOfFederation => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(DatasetKind::Site),
            1 => Ok(DatasetKind::Synthetic),
            2 => Ok(DatasetKind::OutOfFederation),
            _ => Err(Error::data(format!("unknown dataset kind tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub site_id: usize,
    /// Free-form site description.
    pub text: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub clips: Vec<VideoClip>,
}

fn generate(spec: &SceneSpec, n_clips: usize, kind: DatasetKind, text: &str) -> Result<Dataset> {
    spec.validate()?;
    let clips = (0..n_clips).map(|i| gen_clip(spec, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            kind,
            site_id: spec.site_id,
            text: text.to_string(),
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            channels: CHANNELS,
            classes: CLASSES,
        },
        clips,
    })
}

fn clip_rng(spec: &SceneSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    rng
}

/// The scene behind clip `index`.
pub fn clip_scene(spec: &SceneSpec, index: usize) -> Scene {
    Scene::sample(spec, &mut clip_rng(spec, index))
}

/// Clip `index` of a dataset; depends only on the spec and the index.
pub fn gen_clip(spec: &SceneSpec, index: usize) -> Result<VideoClip> {
    let mut rng = clip_rng(spec, index);
    let scene = Scene::sample(spec, &mut rng);
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    let mut data = Vec::with_capacity(n * h * w * CHANNELS);
    let mut masks = Vec::with_capacity(n * h * w);
    for f in 0..n {
        let (img, mask) = scene.render(f, n, h, w, &mut rng);
        data.extend(img);
        masks.extend(mask);
    }
    VideoClip::new(Tensor::new(vec![n, h, w, CHANNELS], data)?, masks, CLASSES)
}

pub fn gen_site_dataset(spec: &SceneSpec, n_clips: usize, text: &str) -> Result<Dataset> {
    generate(spec, n_clips, DatasetKind::Site, text)
}

/// Single-frame, flat-shaded clips.
pub fn gen_synth_dataset(spec: &SceneSpec, n_clips: usize) -> Result<Dataset> {
    let spec = SceneSpec { frames: 1, ..spec.clone() };
    generate(&spec, n_clips, DatasetKind::Synthetic, "synthetic")
}

pub fn gen_out_of_fed_site(spec: &SceneSpec, n_clips: usize, text: &str) -> Result<Dataset> {
    generate(spec, n_clips, DatasetKind::OutOfFederation, text)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Leading clips for training, the trailing `test` clips held out.
    pub fn split(&self, test: usize) -> Result<(Dataset, Dataset)> {
        if test > self.len() {
            return Err(Error::data(format!("{test} test clips requested from {}", self.len())));
        }
        let cut = self.len() - test;
        let part = |clips: &[VideoClip]| Dataset {
            meta: self.meta.clone(),
            clips: clips.to_vec(),
        };
        Ok((part(&self.clips[..cut]), part(&self.clips[cut..])))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(m.kind.tag());
        for v in [m.site_id, self.clips.len(), m.frames, m.height, m.width, m.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(m.classes as u8);
        out.extend_from_slice(&(m.text.len() as u32).to_le_bytes());
        out.extend_from_slice(m.text.as_bytes());
        for clip in &self.clips {
            for &v in clip.frames.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.extend_from_slice(&clip.masks);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < 4 {
            return Err(Error::data("dataset file truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::data("dataset checksum mismatch"));
        }
        let mut r = body;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a dataset file"));
        }
        let version = u16::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::data(format!("unsupported dataset version {version}")));
        }
        let kind = DatasetKind::from_tag(take::<1>(&mut r)?[0])?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut r)?) as usize;
        }
        let [site_id, count, frames, height, width, channels] = dims;
        let classes = take::<1>(&mut r)?[0] as usize;
        let text_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut text = vec![0u8; text_len];
        read_exact(&mut r, &mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::data("site text is not UTF-8"))?;
        let values = frames * height * width * channels;
        let labels = frames * height * width;
        if r.len() != count * (values * 4 + labels) {
            return Err(Error::data("dataset payload size does not match header"));
        }
        let mut clips = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = Vec::with_capacity(values);
            for _ in 0..values {
                data.push(f32::from_le_bytes(take(&mut r)?) as f64);
            }
            let mut masks = vec![0u8; labels];
            read_exact(&mut r, &mut masks)?;
            let frames_t = Tensor::new(vec![frames, height, width, channels], data)
                .map_err(|e| Error::data(format!("bad clip frames: {e}")))?;
            clips.push(VideoClip::new(frames_t, masks, classes)?);
        }
        Ok(Dataset {
            meta: DatasetMeta {
                kind,
                site_id,
                text,
                frames,
                height,
                width,
                channels,
                classes,
            },
            clips,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Dataset::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::data("dataset file truncated"));
    }
    let (head, rest) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = rest;
    Ok(())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Endless stream of clip-index batches: a fresh seeded permutation every
/// pass over the data.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, shuffle_seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::data("cannot sample batches from an empty dataset"));
        }
        Ok(Self {
            len,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
        })
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One pass over the clips as index batches, the last one possibly short.
/// Without a seed the order is the file order.
pub fn iterate_batches(len: usize, batch: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
