//! Deterministic synthetic illustration corpus.
//!
//! Each style owns a color set (background, texture tone, motif ink, stroke
//! colors) disjoint from every other style's, a stroke-width range, a texture
//! frequency, and one exclusive motif glyph. Pages are rendered without
//! blending, so every pixel carries one of its style's colors exactly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, LabeledPage};
use crate::artifact;
use crate::error::{Error, Result};
use crate::image::{self, ImageBuffer};

pub type Rgb = [u8; 3];

/// A binary mask; `#` marks ink.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Glyph {
    pub id: u32,
    pub rows: Vec<String>,
}

impl Glyph {
    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, String::len)
    }

    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.rows[y].as_bytes()[x] == b'#'
    }

    /// Mask as 0/1 values, row-major.
    pub fn mask(&self) -> Vec<f64> {
        self.rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| f64::from(u8::from(b == b'#'))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyleSpec {
    pub style_id: u32,
    pub name: String,
    pub background: Rgb,
    pub texture_tone: Rgb,
    pub ink: Rgb,
    /// Stroke colors.
    pub palette: Vec<Rgb>,
    /// Inclusive pixel range at 128-pixel page size; scaled with resolution.
    pub stroke_width: [usize; 2],
    /// Stripe cycles across the page width.
    pub texture_frequency: f64,
    pub glyphs: Vec<Glyph>,
}

impl SyntheticStyleSpec {
    /// Every color this style may draw with.
    pub fn colors(&self) -> BTreeSet<Rgb> {
        let mut set: BTreeSet<Rgb> = self.palette.iter().copied().collect();
        set.insert(self.background);
        set.insert(self.texture_tone);
        set.insert(self.ink);
        set
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifBox {
    pub glyph_id: u32,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMotifs {
    pub page_id: String,
    pub motifs: Vec<MotifBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_styles: usize,
    pub books_per_style: usize,
    pub pages_per_book: usize,
    /// `[height, width]`
    pub resolution: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_styles: 6,
            books_per_style: 4,
            pages_per_book: 25,
            resolution: [128, 128],
            seed: 7,
        }
    }
}

pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub motifs: Vec<PageMotifs>,
    pub styles: Vec<SyntheticStyleSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MOTIFS_FILE: &str = "motifs.json";
pub const STYLES_FILE: &str = "styles.json";

const GLYPH_LIBRARY: &[&[&str]] = &[
    // plus
    &[
        "..###..", "..###..", "#######", "#######", "#######", "..###..", "..###..",
    ],
    // x
    &[
        "##...##", "###.###", ".#####.", "..###..", ".#####.", "###.###", "##...##",
    ],
    // ring
    &[
        "#######", "#######", "##...##", "##...##", "##...##", "#######", "#######",
    ],
    // triangle
    &[
        "...#...", "..###..", "..###..", ".#####.", ".#####.", "#######", "#######",
    ],
    // H
    &[
        "##...##", "##...##", "#######", "#######", "##...##", "##...##", "##...##",
    ],
    // T
    &[
        "#######", "#######", "..###..", "..###..", "..###..", "..###..", "..###..",
    ],
    // diamond
    &[
        "...#...", "..###..", ".#####.", "#######", ".#####.", "..###..", "...#...",
    ],
    // L
    &[
        "##.....", "##.....", "##.....", "##.....", "##.....", "#######", "#######",
    ],
    // hourglass
    &[
        "#######", ".#####.", "..###..", "...#...", "..###..", ".#####.", "#######",
    ],
    // checker
    &[
        "###....", "###....", "###....", "...####", "...####", "...####", "...####",
    ],
    // bars
    &[
        "##.##.#", "##.##.#", "##.##.#", "##.##.#", "##.##.#", "##.##.#", "##.##.#",
    ],
    // chevron
    &[
        "#.....#", "##...##", ".##.##.", "..###..", "...#...", ".......", ".......",
    ],
];

fn library_glyph(id: u32) -> Glyph {
    Glyph {
        id,
        rows: GLYPH_LIBRARY[id as usize]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

/// A seeded random 7×7 glyph for styles beyond the built-in library.
fn random_glyph(id: u32, seed: u64) -> Glyph {
    let mut rng = artifact::rng(seed, 0x6150_0000 + id as u64);
    let rows = (0..7)
        .map(|_| {
            (0..7)
                .map(|_| if rng.random_bool(0.5) { '#' } else { '.' })
                .collect()
        })
        .collect();
    Glyph { id, rows }
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Built-in style family: hues spread around the color wheel and one
/// exclusive glyph per style. Stroke widths and texture frequency are shared,
/// so they vary only as nuisance from page to page.
pub fn default_styles(num_styles: usize, seed: u64) -> Vec<SyntheticStyleSpec> {
    (0..num_styles)
        .map(|s| {
            let hue = s as f64 / num_styles as f64;
            let id = s as u32;
            let glyph = if (s) < GLYPH_LIBRARY.len() {
                library_glyph(id)
            } else {
                random_glyph(id, seed)
            };
            SyntheticStyleSpec {
                style_id: id,
                name: format!("style_{:02}", s + 1),
                background: hsv(hue, 0.10, 0.96),
                texture_tone: hsv(hue, 0.22, 0.86),
                ink: hsv(hue, 0.85, 0.22),
                palette: vec![
                    hsv(hue - 0.02, 0.55, 0.80),
                    hsv(hue, 0.65, 0.65),
                    hsv(hue + 0.02, 0.45, 0.50),
                ],
                stroke_width: [1, 4],
                texture_frequency: 8.0,
                glyphs: vec![glyph],
            }
        })
        .collect()
}

/// Error naming the first pair of styles that share a color.
pub fn check_disjoint(specs: &[SyntheticStyleSpec]) -> Result<()> {
    let sets: Vec<BTreeSet<Rgb>> = specs.iter().map(SyntheticStyleSpec::colors).collect();
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            if let Some(c) = sets[i].intersection(&sets[j]).next() {
                return Err(Error::invalid(format!(
                    "styles `{}` and `{}` share color {:?}",
                    specs[i].name, specs[j].name, c
                )));
            }
        }
    }
    let mut glyph_ids = BTreeSet::new();
    for s in specs {
        if s.glyphs.is_empty() {
            return Err(Error::invalid(format!(
                "style `{}` has no motif glyph",
                s.name
            )));
        }
        for g in &s.glyphs {
            if !glyph_ids.insert(g.id) {
                return Err(Error::invalid(format!(
                    "glyph {} is not exclusive to one style",
                    g.id
                )));
            }
        }
    }
    Ok(())
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(h: usize, w: usize, fill: Rgb) -> Self {
        Self {
            h,
            w,
            px: vec![fill; h * w],
        }
    }

    fn put(&mut self, y: isize, x: isize, c: Rgb) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    /// Square brush of side `width` stamped along the segment.
    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), width: usize, c: Rgb) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        let half = width as isize / 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (
                (x0 + t * (x1 - x0)).round() as isize,
                (y0 + t * (y1 - y0)).round() as isize,
            );
            for dy in -half..(width as isize - half) {
                for dx in -half..(width as isize - half) {
                    self.put(y + dy, x + dx, c);
                }
            }
        }
    }

    fn to_image(&self) -> ImageBuffer {
        let bytes: Vec<u8> = self.px.iter().flatten().copied().collect();
        ImageBuffer::from_rgb8(self.h, self.w, &bytes).expect("canvas dimensions")
    }
}

/// Per-book drawing choices shared by all pages of that book.
struct BookLook {
    texture_angle: f64,
    stroke_colors: Vec<Rgb>,
    strokes: (usize, usize),
    texture_band: (f64, f64),
}

fn book_look(spec: &SyntheticStyleSpec, book: usize, seed: u64) -> BookLook {
    let mut rng = artifact::rng(
        seed,
        0xB0_0000 + ((spec.style_id as u64) << 12) + book as u64,
    );
    let mut stroke_colors = spec.palette.clone();
    if stroke_colors.len() > 1 {
        stroke_colors.remove(rng.random_range(0..stroke_colors.len()));
    }
    let lo = rng.random_range(2..5);
    let top = rng.random_range(0.0..0.4);
    BookLook {
        texture_angle: rng.random_range(0.0..std::f64::consts::PI),
        stroke_colors,
        strokes: (lo, lo + 4),
        texture_band: (top, top + rng.random_range(0.4..0.6)),
    }
}

fn page_rng(seed: u64, style: u32, book: usize, page: usize) -> ChaCha8Rng {
    artifact::rng(
        seed,
        ((style as u64) << 40) | ((book as u64) << 20) | page as u64,
    )
}

/// Render one page; returns the image and its motif boxes.
pub fn render_page(
    spec: &SyntheticStyleSpec,
    book: usize,
    page: usize,
    resolution: [usize; 2],
    seed: u64,
) -> (ImageBuffer, Vec<MotifBox>) {
    let [h, w] = resolution;
    let look = book_look(spec, book, seed);
    let mut rng = page_rng(seed, spec.style_id, book, page);
    let unit = h.min(w) as f64 / 128.0;
    let mut canvas = Canvas::new(h, w, spec.background);

    // texture stripes across a horizontal band
    let freq = spec.texture_frequency * rng.random_range(0.9..1.1);
    let (s, c) = look.texture_angle.sin_cos();
    let band = (
        (look.texture_band.0 * h as f64) as usize,
        ((look.texture_band.1 * h as f64) as usize).min(h),
    );
    for y in band.0..band.1 {
        for x in 0..w {
            let u = (x as f64 * c + y as f64 * s) * freq / w as f64;
            if u.rem_euclid(1.0) < 0.35 {
                canvas.px[y * w + x] = spec.texture_tone;
            }
        }
    }

    // strokes
    let n_strokes = rng.random_range(look.strokes.0..=look.strokes.1);
    let [wlo, whi] = spec.stroke_width;
    for _ in 0..n_strokes {
        let color = look.stroke_colors[rng.random_range(0..look.stroke_colors.len())];
        let width = ((rng.random_range(wlo..=whi) as f64 * unit).round() as usize).max(1);
        let start = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let len = rng.random_range(0.2..0.6) * w as f64;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let bend = rng.random_range(-0.8..0.8);
        // two-segment polyline
        let mid = (
            start.0 + 0.5 * len * angle.cos(),
            start.1 + 0.5 * len * angle.sin(),
        );
        let end = (
            mid.0 + 0.5 * len * (angle + bend).cos(),
            mid.1 + 0.5 * len * (angle + bend).sin(),
        );
        canvas.line(start, mid, width, color);
        canvas.line(mid, end, width, color);
    }

    // motifs, non-overlapping
    let glyph = &spec.glyphs[0];
    let scale = ((0.22 * h.min(w) as f64 / glyph.width().max(glyph.height()) as f64).round()
        as usize)
        .max(1);
    let (gh, gw) = (glyph.height() * scale, glyph.width() * scale);
    let wanted = rng.random_range(1..=4usize);
    let mut boxes: Vec<MotifBox> = Vec::new();
    for _ in 0..wanted * 30 {
        if boxes.len() == wanted || gw >= w || gh >= h {
            break;
        }
        let gl = &spec.glyphs[rng.random_range(0..spec.glyphs.len())];
        let (x, y) = (rng.random_range(0..=w - gw), rng.random_range(0..=h - gh));
        let clear = boxes.iter().all(|b| {
            x + gw + 2 <= b.x || b.x + b.w + 2 <= x || y + gh + 2 <= b.y || b.y + b.h + 2 <= y
        });
        if !clear {
            continue;
        }
        for gy in 0..gl.height() * scale {
            for gx in 0..gl.width() * scale {
                if gl.is_set(gy / scale, gx / scale) {
                    canvas.put((y + gy) as isize, (x + gx) as isize, spec.ink);
                }
            }
        }
        boxes.push(MotifBox {
            glyph_id: gl.id,
            x,
            y,
            w: gw,
            h: gh,
        });
    }
    (canvas.to_image(), boxes)
}

fn page_id(spec: &SyntheticStyleSpec, book: usize, page: usize) -> (String, String, PathBuf) {
    let book_id = format!("book_{:02}", book + 1);
    let stem = format!("page_{:03}", page + 1);
    let rel = PathBuf::from(&spec.name)
        .join(&book_id)
        .join(format!("{stem}.ppm"));
    (format!("{}/{}/{}", spec.name, book_id, stem), book_id, rel)
}

/// Render the whole corpus in memory: manifest plus images in manifest order.
pub fn render_corpus(
    config: &SynthConfig,
    specs: &[SyntheticStyleSpec],
) -> Result<(CorpusManifest, Vec<ImageBuffer>, Vec<PageMotifs>)> {
    if specs.len() != config.num_styles {
        return Err(Error::invalid(format!(
            "{} style specs for {} styles",
            specs.len(),
            config.num_styles
        )));
    }
    if config.books_per_style == 0 || config.pages_per_book == 0 || config.resolution.contains(&0) {
        return Err(Error::invalid(
            "synthetic corpus needs at least one book, one page, and a nonzero resolution",
        ));
    }
    check_disjoint(specs)?;
    let jobs: Vec<(usize, usize, usize)> = (0..specs.len())
        .flat_map(|s| {
            (0..config.books_per_style)
                .flat_map(move |b| (0..config.pages_per_book).map(move |p| (s, b, p)))
        })
        .collect();
    let rendered: Vec<(ImageBuffer, Vec<MotifBox>)> = jobs
        .par_iter()
        .map(|&(s, b, p)| render_page(&specs[s], b, p, config.resolution, config.seed))
        .collect();
    let mut pages = Vec::with_capacity(jobs.len());
    let mut images = Vec::with_capacity(jobs.len());
    let mut motifs = Vec::with_capacity(jobs.len());
    for (&(s, b, p), (img, boxes)) in jobs.iter().zip(rendered) {
        let (id, book_id, rel) = page_id(&specs[s], b, p);
        pages.push(LabeledPage {
            page_id: id.clone(),
            illustrator_id: s as u32 + 1,
            book_id,
            path: rel,
        });
        images.push(img);
        motifs.push(PageMotifs {
            page_id: id,
            motifs: boxes,
        });
    }
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let manifest = CorpusManifest::from_pages(&names, pages, config.resolution, PathBuf::new());
    Ok((manifest, images, motifs))
}

/// Render and write `out/<style>/<book>/<page>.ppm`, plus the manifest, motif
/// sidecar, and style specs next to them.
pub fn generate_synthetic_corpus(
    config: &SynthConfig,
    specs: &[SyntheticStyleSpec],
    out: &Path,
) -> Result<SyntheticCorpus> {
    let (mut manifest, images, motifs) = render_corpus(config, specs)?;
    manifest.root = out.to_path_buf();
    manifest
        .pages
        .par_iter()
        .zip(images.par_iter())
        .map(|(page, img)| image::save(img, &out.join(&page.path)))
        .collect::<Result<Vec<()>>>()?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    artifact::write_json(&out.join(MOTIFS_FILE), &motifs)?;
    artifact::write_json(&out.join(STYLES_FILE), &specs)?;
    Ok(SyntheticCorpus {
        manifest,
        motifs,
        styles: specs.to_vec(),
    })
}
