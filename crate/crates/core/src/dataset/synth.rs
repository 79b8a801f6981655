//! Deterministic synthetic doorway scenes with ground-truth annotations.
//!
//! Every frame shows `k` doorways on a textured wall. Each doorway is a
//! rectangle with a coloured frame (a distinct hue per doorway, all hues of
//! equal channel-mean) around a flat grey interior. Exactly one doorway is
//! the main transition point:
//!
//! * **local-cue frames** — interiors get distinct grey levels and the
//!   main doorway is the brightest one;
//! * **global-cue frames** — every interior has the same grey level. A
//!   small beacon glyph in the main doorway's frame hue sits next to it,
//!   nearer to it than to any other doorway, and a banner across the top of
//!   the frame repeats that hue so the cue survives the 64-pixel thumbnail.
//!
//! Doorways are always placed below the banner strip, so no doorway box
//! ever contains banner pixels.
//!
//! In a global-cue frame nothing inside a doorway box depends on which
//! doorway is the main one, so a model that sees only the box contents
//! cannot beat chance there.
//!
//! Frame `i` is drawn from its own ChaCha stream of `seed`, so frames are
//! independent of `num_frames` and generation is bit-deterministic.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::image::RgbImage;
use crate::dataset::manifest::{save_manifest, DatasetManifest, FrameRecord, StpAnnotation};
use crate::dataset::DatasetError;

/// Frame hues, 8-bit RGB, each summing to 384 (channel mean 128).
pub const FRAME_HUES: [[u8; 3]; 6] =
    [[230, 77, 77], [77, 230, 77], [77, 77, 230], [192, 192, 0], [192, 0, 192], [0, 192, 192]];
/// Interior grey used for every doorway of a global-cue frame.
pub const GLOBAL_CUE_GREY: u8 = 128;
/// Interior grey levels available to local-cue frames.
const LOCAL_GREYS: [u8; 9] = [31, 56, 82, 107, 133, 158, 184, 209, 235];

const LAYOUT_ATTEMPTS: usize = 64;
const BOX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthStyle {
    /// Warm grey brick wall, thin doorway frames.
    Stone,
    /// Green mottled wall, thick doorway frames with a dark outline.
    Moss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub num_frames: usize,
    /// Inclusive `[min, max]` doorway count per frame.
    #[serde(default = "default_doorways")]
    pub doorways_per_frame: [usize; 2],
    #[serde(default = "default_global")]
    pub global_cue_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_style")]
    pub style: SynthStyle,
    #[serde(default = "default_game")]
    pub game: String,
}

fn default_size() -> usize {
    512
}
fn default_doorways() -> [usize; 2] {
    [1, 5]
}
fn default_global() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.3
}
fn default_style() -> SynthStyle {
    SynthStyle::Stone
}
fn default_game() -> String {
    "synth".to_string()
}

impl SynthConfig {
    pub fn new(num_frames: usize) -> Self {
        Self {
            image_size: default_size(),
            num_frames,
            doorways_per_frame: default_doorways(),
            global_cue_fraction: default_global(),
            noise_level: default_noise(),
            style: default_style(),
            game: default_game(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let [lo, hi] = self.doorways_per_frame;
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        if lo == 0 || lo > hi {
            return bad(format!("doorways_per_frame must be a non-empty range starting at 1 or more, got {lo}..={hi}"));
        }
        if hi > FRAME_HUES.len() {
            return bad(format!("at most {} doorways per frame are supported, got {hi}", FRAME_HUES.len()));
        }
        if !(0.0..=1.0).contains(&self.global_cue_fraction) {
            return bad(format!("global_cue_fraction must be in [0,1], got {}", self.global_cue_fraction));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level must be in [0,1], got {}", self.noise_level));
        }
        if self.game.is_empty() {
            return bad("game tag must not be empty".into());
        }
        Ok(())
    }
}

/// Generator-side ground truth that the manifest schema does not carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFrameInfo {
    pub frame_id: String,
    pub cue: Cue,
    /// Channel-mean interior level per doorway, in annotation order.
    pub interior_level: Vec<f64>,
    /// Index into [`FRAME_HUES`] per doorway.
    pub hue: Vec<usize>,
    pub beacon: Option<BBox>,
    /// Top strip painted in the main doorway's hue, global-cue frames only.
    pub banner: Option<BBox>,
    /// Pixels between a doorway's box edge and its interior.
    pub frame_width: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub info: Vec<SynthFrameInfo>,
}

impl SynthCorpus {
    /// Writes `manifest.json`, `synth_meta.json` and `images/*.png`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images")).map_err(|e| DatasetError::Io(dir.to_path_buf(), e))?;
        for (f, img) in self.manifest.frames.iter().zip(&self.images) {
            img.save_png(dir.join(&f.image_path))?;
        }
        save_manifest(&self.manifest, dir.join("manifest.json"))?;
        let meta = serde_json::to_string_pretty(&self.info).map_err(DatasetError::Parse)?;
        let p = dir.join("synth_meta.json");
        fs::write(&p, meta).map_err(|e| DatasetError::Io(p, e))
    }

    pub fn info(&self, frame_id: &str) -> Option<&SynthFrameInfo> {
        self.info.iter().find(|i| i.frame_id == frame_id)
    }
}

pub fn load_synth_meta(path: impl AsRef<Path>) -> Result<Vec<SynthFrameInfo>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    serde_json::from_str(&text).map_err(DatasetError::Parse)
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus, DatasetError> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut images = Vec::with_capacity(cfg.num_frames);
    let mut info = Vec::with_capacity(cfg.num_frames);
    for i in 0..cfg.num_frames {
        let (f, img, inf) = render_frame(cfg, seed, i)?;
        frames.push(f);
        images.push(img);
        info.push(inf);
    }
    let provenance = format!(
        "synthetic doorway scenes: style={:?} size={} doorways={}..={} global_cue_fraction={} noise={} seed={seed}",
        cfg.style, cfg.image_size, cfg.doorways_per_frame[0], cfg.doorways_per_frame[1], cfg.global_cue_fraction, cfg.noise_level
    );
    let manifest = DatasetManifest::new(provenance, frames);
    manifest.validate()?;
    Ok(SynthCorpus { manifest, images, info })
}

struct Layout {
    doors: Vec<BBox>,
    mstp: usize,
    beacon: Option<BBox>,
    banner: Option<BBox>,
}

/// Renders frame `index` of the corpus defined by `(cfg, seed)`.
pub fn render_frame(cfg: &SynthConfig, seed: u64, index: usize) -> Result<(FrameRecord, RgbImage, SynthFrameInfo), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let s = cfg.image_size;
    let cue = if rng.random::<f64>() < cfg.global_cue_fraction { Cue::Global } else { Cue::Local };
    let k = rng.random_range(cfg.doorways_per_frame[0]..=cfg.doorways_per_frame[1]);

    let frame_width = frame_width(s, cfg.style);
    let layout = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| try_layout(&mut rng, s, k, cue, frame_width))
        .ok_or(DatasetError::PlacementFailed { frame_index: index })?;

    let mut hues: Vec<usize> = (0..FRAME_HUES.len()).collect();
    hues.shuffle(&mut rng);
    hues.truncate(k);

    let levels: Vec<u8> = match cue {
        Cue::Global => vec![GLOBAL_CUE_GREY; k],
        Cue::Local => {
            let mut pool = LOCAL_GREYS.to_vec();
            pool.shuffle(&mut rng);
            let mut lv: Vec<u8> = pool[..k].to_vec();
            // brightest grey goes to the chosen doorway
            let top = lv.iter().enumerate().max_by_key(|(_, v)| **v).map(|(i, _)| i).unwrap();
            lv.swap(top, layout.mstp);
            lv
        }
    };

    let mut img = render_wall(&mut rng, s, cfg);
    for (d, door) in layout.doors.iter().enumerate() {
        paint_door(&mut img, door, FRAME_HUES[hues[d]], levels[d], frame_width, cfg.style);
    }
    for b in layout.beacon.iter().chain(&layout.banner) {
        fill_rect(&mut img, b, rgb8(FRAME_HUES[hues[layout.mstp]]));
    }
    img.quantize();

    let frame_id = format!("{}_{index:05}", cfg.game);
    let record = FrameRecord {
        frame_id: frame_id.clone(),
        image_path: format!("images/{frame_id}.png"),
        width: s as u32,
        height: s as u32,
        game: cfg.game.clone(),
        annotations: layout.doors.iter().enumerate().map(|(i, b)| StpAnnotation::certain(*b, i == layout.mstp)).collect(),
    };
    let info = SynthFrameInfo {
        frame_id,
        cue,
        interior_level: levels.iter().map(|&l| l as f64 / 255.0).collect(),
        hue: hues,
        beacon: layout.beacon,
        banner: layout.banner,
        frame_width,
    };
    Ok((record, img, info))
}

fn frame_width(s: usize, style: SynthStyle) -> usize {
    let base = ((s as f64 * 0.025).round() as usize).max(2);
    match style {
        SynthStyle::Stone => base,
        SynthStyle::Moss => base * 2,
    }
}

/// Height of the top strip kept free of doorways.
fn banner_height(sf: f64) -> f64 {
    (0.1 * sf).round().max(2.0)
}

fn try_layout(rng: &mut ChaCha8Rng, s: usize, k: usize, cue: Cue, frame_width: usize) -> Option<Layout> {
    let sf = s as f64;
    let margin = (0.02 * sf).round().max(1.0);
    let gap = (0.03 * sf).round().max(2.0);
    let top = banner_height(sf) + margin;
    let mut doors: Vec<BBox> = Vec::with_capacity(k);
    for _ in 0..k {
        let placed = (0..BOX_ATTEMPTS).find_map(|_| {
            // a doorway always keeps some interior inside its frame
            let w = (sf * rng.random_range(0.10..0.22)).round().max(2.0 * frame_width as f64 + 2.0);
            let h = (w * rng.random_range(1.3..1.9)).round().min((0.45 * sf).round());
            if top + h > sf - margin || margin + w > sf - margin {
                return None;
            }
            let x = rng.random_range(margin..=(sf - margin - w)).round();
            let y = rng.random_range(top..=(sf - margin - h)).round();
            let cand = BBox::new(x, y, x + w, y + h);
            let grown = grow(&cand, gap);
            doors.iter().all(|d| grown.intersection(d) == 0.0).then_some(cand)
        })?;
        doors.push(placed);
    }
    let mstp = rng.random_range(0..k);
    let (beacon, banner) = match cue {
        Cue::Local => (None, None),
        Cue::Global => (Some(place_beacon(rng, sf, &doors, mstp)?), Some(BBox::new(0.0, 0.0, sf, banner_height(sf)))),
    };
    Some(Layout { doors, mstp, beacon, banner })
}

/// Puts a square glyph beside `doors[target]`, below the banner strip,
/// clear of every doorway and strictly nearer to the target than to any
/// other doorway both by centre distance and by point-to-box distance.
fn place_beacon(rng: &mut ChaCha8Rng, sf: f64, doors: &[BBox], target: usize) -> Option<BBox> {
    let size = (0.06 * sf).round().max(4.0);
    let gap = (0.015 * sf).round().max(2.0);
    let strip = banner_height(sf);
    let d = doors[target];
    let (cx, cy) = d.center();
    let jitter = rng.random_range(-0.25..0.25);
    let mut sides = [0usize, 1, 2, 3];
    sides.shuffle(rng);
    for side in sides {
        let (x, y) = match side {
            0 => (d.x2 + gap, cy - size / 2.0 + jitter * d.height()),
            1 => (d.x1 - gap - size, cy - size / 2.0 + jitter * d.height()),
            2 => (cx - size / 2.0 + jitter * d.width(), d.y1 - gap - size),
            _ => (cx - size / 2.0 + jitter * d.width(), d.y2 + gap),
        };
        let b = BBox::new(x.round(), y.round(), x.round() + size, y.round() + size);
        if !b.within(sf, sf) || b.y1 < strip || doors.iter().any(|o| grow(o, 1.0).intersection(&b) > 0.0) {
            continue;
        }
        let (bx, by) = b.center();
        let centre_dist = |o: &BBox| {
            let (ox, oy) = o.center();
            (ox - bx).hypot(oy - by)
        };
        let box_dist = |o: &BBox| {
            let dx = (o.x1 - bx).max(0.0).max(bx - o.x2);
            let dy = (o.y1 - by).max(0.0).max(by - o.y2);
            dx.hypot(dy)
        };
        let nearest = doors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .all(|(_, o)| centre_dist(o) > centre_dist(&d) && box_dist(o) > box_dist(&d));
        if nearest {
            return Some(b);
        }
    }
    None
}

fn grow(b: &BBox, by: f64) -> BBox {
    BBox::new(b.x1 - by, b.y1 - by, b.x2 + by, b.y2 + by)
}

fn rgb8(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| v as f32 / 255.0)
}

fn fill_rect(img: &mut RgbImage, b: &BBox, rgb: [f32; 3]) {
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            img.put_rgb(y, x, rgb);
        }
    }
}

fn paint_door(img: &mut RgbImage, b: &BBox, hue: [u8; 3], grey: u8, frame_width: usize, style: SynthStyle) {
    fill_rect(img, b, rgb8(hue));
    if style == SynthStyle::Moss {
        let dark = [0.08; 3];
        let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
        for x in x1..x2 {
            img.put_rgb(y1, x, dark);
            img.put_rgb(y2 - 1, x, dark);
        }
        for y in y1..y2 {
            img.put_rgb(y, x1, dark);
            img.put_rgb(y, x2 - 1, dark);
        }
    }
    let fw = frame_width as f64;
    let inner = BBox::new(b.x1 + fw, b.y1 + fw, b.x2 - fw, b.y2 - fw);
    fill_rect(img, &inner, rgb8([grey; 3]));
}

fn render_wall(rng: &mut ChaCha8Rng, s: usize, cfg: &SynthConfig) -> RgbImage {
    let shade: f32 = rng.random_range(-0.05..0.05);
    let noise = cfg.noise_level as f32 * 0.12;
    let mut img = RgbImage::new(s, s);
    match cfg.style {
        SynthStyle::Stone => {
            let base = [0.44 + shade, 0.40 + shade, 0.36 + shade];
            let brick_h = (s / 16).max(4);
            let brick_w = brick_h * 2;
            let offset = rng.random_range(0..brick_w);
            for y in 0..s {
                let course = y / brick_h;
                let shift = if course % 2 == 0 { offset } else { offset + brick_w / 2 };
                for x in 0..s {
                    let mortar = y % brick_h == 0 || (x + shift) % brick_w == 0;
                    let n = rng.random_range(-1.0..1.0) * noise;
                    let rgb = if mortar { [0.28 + n; 3] } else { base.map(|c| c + n) };
                    img.put_rgb(y, x, rgb.map(|v| v.clamp(0.0, 1.0)));
                }
            }
        }
        SynthStyle::Moss => {
            let base = [0.24 + shade, 0.36 + shade, 0.26 + shade];
            let waves: Vec<(f32, f32, f32)> = (0..4)
                .map(|_| (rng.random_range(1.0..5.0), rng.random_range(1.0..5.0), rng.random_range(0.0..6.28)))
                .collect();
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
                    let blot: f32 = waves.iter().map(|(a, b, p)| (6.28 * (a * u + b * v) + p).sin()).sum::<f32>() * 0.03;
                    let n = rng.random_range(-1.0..1.0) * noise;
                    img.put_rgb(y, x, base.map(|c| (c + blot + n).clamp(0.0, 1.0)));
                }
            }
        }
    }
    img
}
