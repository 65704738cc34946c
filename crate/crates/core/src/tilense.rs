//! Tile-occlusion importance for a black-box classifier.
//!
//! The image is covered by a 3×3 grid of overlapping tiles (window = half
//! the image, stride = a quarter). The unmasked image is queried `n_runs`
//! times and the majority answer becomes the base answer; each tile is then
//! masked and queried `n_runs` times, scoring one point per answer that
//! deviates from the base. Per-pixel heat is the mean flip rate of the tiles
//! covering that pixel, rendered as a white→red overlay next to a JSON
//! sidecar with the raw scores.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    cached_complete, CacheMode, ChatBackend, GenerationParams, ResponseCache, RunLedger,
};
use crate::extraction::{extract_rules, to_task_label, TaskLabel, Vocabulary};
use crate::preprocess::{encode_png, PreprocessError};
use crate::prompts::{render, PromptError, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TileRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// The 3×3 overlapping tiling of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_w: u32,
    pub image_h: u32,
    pub window_w: u32,
    pub window_h: u32,
    pub stride_x: u32,
    pub stride_y: u32,
    pub tiles: Vec<TileRect>,
}

#[derive(Debug, Error)]
pub enum TilenseError {
    #[error("image {w}x{h} too small to tile (needs at least 4x4)")]
    Degenerate { w: u32, h: u32 },
    #[error("tile {tile:?} exceeds image bounds {w}x{h}")]
    OutOfBounds { tile: TileRect, w: u32, h: u32 },
    #[error("heat map is {heat_w}x{heat_h} but image is {img_w}x{img_h}")]
    SizeMismatch {
        heat_w: u32,
        heat_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("unknown fill policy {0:?}; use black or mean")]
    UnknownFill(String),
    #[error(transparent)]
    Backend(#[from] crate::backends::BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Image(#[from] PreprocessError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Builds the 3×3 overlapping grid: window = ceil(dim/2), stride =
/// ceil(dim/4), offsets {0, stride, dim − window} per axis. The last offset
/// equals 2·stride whenever that fits, and is clamped to keep tiles in
/// bounds on odd sizes; coverage is complete either way.
pub fn make_grid(w: u32, h: u32) -> Result<TileGrid, TilenseError> {
    if w < 4 || h < 4 {
        return Err(TilenseError::Degenerate { w, h });
    }
    let window_w = w.div_ceil(2);
    let window_h = h.div_ceil(2);
    let stride_x = w.div_ceil(4);
    let stride_y = h.div_ceil(4);
    let xs = [0, stride_x, (2 * stride_x).min(w - window_w)];
    let ys = [0, stride_y, (2 * stride_y).min(h - window_h)];
    let tiles = ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileRect {
                x,
                y,
                w: window_w,
                h: window_h,
            })
        })
        .collect();
    Ok(TileGrid {
        image_w: w,
        image_h: h,
        window_w,
        window_h,
        stride_x,
        stride_y,
        tiles,
    })
}

/// What masked pixels are filled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillPolicy {
    Black,
    /// The image's mean color, for models that read solid black as a shadow.
    Mean,
}

impl fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FillPolicy::Black => "black",
            FillPolicy::Mean => "mean",
        })
    }
}

impl FromStr for FillPolicy {
    type Err = TilenseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "black" => Ok(FillPolicy::Black),
            "mean" => Ok(FillPolicy::Mean),
            other => Err(TilenseError::UnknownFill(other.to_string())),
        }
    }
}

/// Returns a copy with the tile's pixels replaced by the fill color; every
/// pixel outside the tile is bit-identical to the input.
pub fn mask_tile(
    image: &RgbImage,
    tile: &TileRect,
    fill: FillPolicy,
) -> Result<RgbImage, TilenseError> {
    let (w, h) = image.dimensions();
    if tile.x + tile.w > w || tile.y + tile.h > h {
        return Err(TilenseError::OutOfBounds { tile: *tile, w, h });
    }
    let color = match fill {
        FillPolicy::Black => image::Rgb([0, 0, 0]),
        FillPolicy::Mean => mean_color(image),
    };
    let mut masked = image.clone();
    for y in tile.y..tile.y + tile.h {
        for x in tile.x..tile.x + tile.w {
            masked.put_pixel(x, y, color);
        }
    }
    Ok(masked)
}

fn mean_color(image: &RgbImage) -> image::Rgb<u8> {
    let mut sums = [0u64; 3];
    for pixel in image.pixels() {
        for (sum, &v) in sums.iter_mut().zip(pixel.0.iter()) {
            *sum += v as u64;
        }
    }
    let n = (image.width() as u64 * image.height() as u64).max(1);
    image::Rgb(sums.map(|s| ((s as f64 / n as f64).round() as u64).min(255) as u8))
}

/// Majority answer with a deterministic tie-break: highest count first, then
/// the lexicographically smallest label string; ties set `low_confidence`.
pub fn majority_vote(answers: &[TaskLabel]) -> (TaskLabel, BTreeMap<TaskLabel, u32>, bool) {
    assert!(!answers.is_empty(), "vote needs at least one answer");
    let mut votes: BTreeMap<TaskLabel, u32> = BTreeMap::new();
    for &answer in answers {
        *votes.entry(answer).or_default() += 1;
    }
    let top = *votes.values().max().unwrap();
    let mut leaders: Vec<TaskLabel> = votes
        .iter()
        .filter(|&(_, &count)| count == top)
        .map(|(&label, _)| label)
        .collect();
    leaders.sort_by_key(|l| l.to_string());
    (leaders[0], votes, leaders.len() > 1)
}

/// Flip counts for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileScores {
    pub n_runs: u32,
    pub base_answer: TaskLabel,
    pub base_votes: BTreeMap<TaskLabel, u32>,
    pub low_confidence: bool,
    /// One flip count in [0, n_runs] per grid tile.
    pub per_tile: Vec<u32>,
}

/// Per-pixel heat in [0, 1] at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub width: u32,
    pub height: u32,
    values: Vec<f32>,
}

impl HeatMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Each pixel's heat is the mean of `score / n_runs` over the tiles
/// covering it; the grid covers every pixel, so the mean is well defined.
pub fn pixel_heat(grid: &TileGrid, scores: &TileScores) -> HeatMap {
    let mut values = vec![0.0f32; (grid.image_w * grid.image_h) as usize];
    for y in 0..grid.image_h {
        for x in 0..grid.image_w {
            let mut total = 0.0f32;
            let mut covering = 0u32;
            for (tile, &score) in grid.tiles.iter().zip(&scores.per_tile) {
                if tile.contains(x, y) {
                    total += score as f32 / scores.n_runs as f32;
                    covering += 1;
                }
            }
            debug_assert!(covering > 0, "grid must cover every pixel");
            values[(y * grid.image_w + x) as usize] = total / covering as f32;
        }
    }
    HeatMap {
        width: grid.image_w,
        height: grid.image_h,
        values,
    }
}

/// Strongest tint applied where heat is 1.
const OVERLAY_OPACITY: f32 = 0.6;

/// Writes the image blended with a white→red heat overlay: heat 0 leaves
/// pixels untouched, heat 1 applies a 60%-opacity saturated red.
pub fn render_heatmap(image: &RgbImage, heat: &HeatMap, out_path: &Path) -> Result<(), TilenseError> {
    let (w, h) = image.dimensions();
    if heat.width != w || heat.height != h {
        return Err(TilenseError::SizeMismatch {
            heat_w: heat.width,
            heat_h: heat.height,
            img_w: w,
            img_h: h,
        });
    }
    let rendered = RgbImage::from_fn(w, h, |x, y| {
        let value = heat.get(x, y).clamp(0.0, 1.0);
        let overlay = [255.0, 255.0 * (1.0 - value), 255.0 * (1.0 - value)];
        let alpha = value * OVERLAY_OPACITY;
        let source = image.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = ((1.0 - alpha) * source[c] as f32 + alpha * overlay[c]).round() as u8;
        }
        image::Rgb(out)
    });
    rendered.save(out_path).map_err(PreprocessError::Encode)?;
    Ok(())
}

/// Everything needed to reconstruct a run: geometry, votes, and raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilenseSidecar {
    pub image_id: String,
    pub grid: TileGrid,
    pub n_runs: u32,
    pub fill: FillPolicy,
    pub base_answer: TaskLabel,
    pub base_votes: BTreeMap<TaskLabel, u32>,
    pub low_confidence: bool,
    pub per_tile: Vec<u32>,
}

impl TilenseSidecar {
    pub fn scores(&self) -> TileScores {
        TileScores {
            n_runs: self.n_runs,
            base_answer: self.base_answer,
            base_votes: self.base_votes.clone(),
            low_confidence: self.low_confidence,
            per_tile: self.per_tile.clone(),
        }
    }
}

/// Shared wiring for probing one or more images against one backend.
pub struct TilenseSession<'a> {
    pub backend: &'a dyn ChatBackend,
    pub cache: Option<&'a ResponseCache>,
    pub cache_mode: CacheMode,
    pub ledger: Option<&'a RunLedger>,
    pub vocab: &'a Vocabulary,
    pub template: &'a PromptTemplate,
    pub n_runs: u32,
    pub fill: FillPolicy,
}

impl TilenseSession<'_> {
    /// One probe query: render the template on the given image bytes, call
    /// the backend with the sampling preset (temperature 1, 300 tokens, no
    /// seed), and reduce the reply to a task label.
    fn ask(&self, image_png: Vec<u8>) -> Result<TaskLabel, TilenseError> {
        let conversation = render(self.template, image_png)?;
        let response = cached_complete(
            self.cache,
            self.cache_mode,
            self.backend,
            &conversation,
            &GenerationParams::tilense(),
            self.ledger,
        )?;
        let task = self.template.id.task();
        let outcome = extract_rules(self.vocab, &response.raw_text, task);
        Ok(to_task_label(&outcome, task))
    }

    fn ask_n(&self, image: &RgbImage) -> Result<Vec<TaskLabel>, TilenseError> {
        let png = encode_png(image)?;
        (0..self.n_runs).map(|_| self.ask(png.clone())).collect()
    }

    /// Majority-vote base answer from `n_runs` unmasked queries.
    pub fn vote_base_answer(
        &self,
        image: &RgbImage,
    ) -> Result<(TaskLabel, BTreeMap<TaskLabel, u32>, bool), TilenseError> {
        Ok(majority_vote(&self.ask_n(image)?))
    }

    /// Flip counts per tile: each masked query answering anything other
    /// than `base_answer` scores one point.
    pub fn score_tiles(
        &self,
        image: &RgbImage,
        grid: &TileGrid,
        base_answer: TaskLabel,
    ) -> Result<Vec<u32>, TilenseError> {
        grid.tiles
            .iter()
            .map(|tile| {
                let masked = mask_tile(image, tile, self.fill)?;
                let answers = self.ask_n(&masked)?;
                Ok(answers.iter().filter(|&&a| a != base_answer).count() as u32)
            })
            .collect()
    }

    /// Full pipeline for one image: base vote, grid, tile scores.
    /// Costs exactly `n_runs · (1 + tile_count)` backend calls.
    pub fn analyze(&self, image_id: &str, image: &RgbImage) -> Result<TilenseSidecar, TilenseError> {
        let (w, h) = image.dimensions();
        let grid = make_grid(w, h)?;
        let (base_answer, base_votes, low_confidence) = self.vote_base_answer(image)?;
        let per_tile = self.score_tiles(image, &grid, base_answer)?;
        Ok(TilenseSidecar {
            image_id: image_id.to_string(),
            grid,
            n_runs: self.n_runs,
            fill: self.fill,
            base_answer,
            base_votes,
            low_confidence,
            per_tile,
        })
    }
}

/// Writes `<image_id>.tilense.png` and `<image_id>.tilense.json` into
/// `out_dir` and returns both paths.
pub fn write_outputs(
    sidecar: &TilenseSidecar,
    image: &RgbImage,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), TilenseError> {
    std::fs::create_dir_all(out_dir)?;
    let png_path = out_dir.join(format!("{}.tilense.png", sidecar.image_id));
    let json_path = out_dir.join(format!("{}.tilense.json", sidecar.image_id));
    let heat = pixel_heat(&sidecar.grid, &sidecar.scores());
    render_heatmap(image, &heat, &png_path)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(sidecar)?)?;
    Ok((png_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockBackend;
    use crate::prompts::{PromptRegistry, TemplateId};
    use proptest::prelude::*;
    use tempfile::TempDir;

    use TaskLabel::{NoAnswer, NormalMucosa, Polyp};

    #[test]
    fn grid_300_square() {
        let grid = make_grid(300, 300).unwrap();
        assert_eq!(grid.tiles.len(), 9);
        assert_eq!((grid.window_w, grid.window_h), (150, 150));
        assert_eq!((grid.stride_x, grid.stride_y), (75, 75));
        let offsets: Vec<(u32, u32)> = grid.tiles.iter().map(|t| (t.x, t.y)).collect();
        for y in [0, 75, 150] {
            for x in [0, 75, 150] {
                assert!(offsets.contains(&(x, y)), "missing tile at ({x},{y})");
            }
        }
    }

    /// Pixel-count oracle: every pixel covered at least once, and the
    /// overlap regions exist (the center is covered four times).
    #[test]
    fn grid_300_coverage_and_overlap() {
        let grid = make_grid(300, 300).unwrap();
        let covering = |x: u32, y: u32| grid.tiles.iter().filter(|t| t.contains(x, y)).count();
        for y in (0..300).step_by(3) {
            for x in (0..300).step_by(3) {
                assert!(covering(x, y) >= 1, "uncovered pixel ({x},{y})");
            }
        }
        assert_eq!(covering(0, 0), 1);
        assert_eq!(covering(150, 150), 4);
        assert_eq!(covering(299, 299), 1);
        assert_eq!(covering(100, 100), 4);
    }

    #[test]
    fn grid_minimum_size() {
        let grid = make_grid(4, 4).unwrap();
        assert_eq!(grid.tiles.len(), 9);
        assert_eq!((grid.window_w, grid.window_h), (2, 2));
        let xs: Vec<u32> = grid.tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn grid_non_square() {
        let grid = make_grid(300, 200).unwrap();
        assert_eq!((grid.window_w, grid.window_h), (150, 100));
        assert_eq!((grid.stride_x, grid.stride_y), (75, 50));
        assert_eq!(grid.tiles.len(), 9);
    }

    #[test]
    fn grid_odd_dimension_stays_in_bounds_and_covers() {
        let grid = make_grid(7, 7).unwrap();
        for tile in &grid.tiles {
            assert!(tile.x + tile.w <= 7 && tile.y + tile.h <= 7, "{tile:?}");
        }
        for y in 0..7 {
            for x in 0..7 {
                assert!(grid.tiles.iter().any(|t| t.contains(x, y)));
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(matches!(make_grid(3, 10), Err(TilenseError::Degenerate { .. })));
        assert!(matches!(make_grid(10, 2), Err(TilenseError::Degenerate { .. })));
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn mask_black_changes_only_the_tile() {
        let image = gradient_image(40, 30);
        let tile = TileRect { x: 5, y: 8, w: 10, h: 12 };
        let masked = mask_tile(&image, &tile, FillPolicy::Black).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                if tile.contains(x, y) {
                    assert_eq!(masked.get_pixel(x, y).0, [0, 0, 0]);
                } else {
                    assert_eq!(masked.get_pixel(x, y), image.get_pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn mask_full_image_is_all_black() {
        let image = gradient_image(8, 8);
        let tile = TileRect { x: 0, y: 0, w: 8, h: 8 };
        let masked = mask_tile(&image, &tile, FillPolicy::Black).unwrap();
        assert!(masked.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn mask_mean_fill_uses_image_mean() {
        let mut image = RgbImage::from_pixel(2, 1, image::Rgb([10, 0, 200]));
        image.put_pixel(1, 0, image::Rgb([30, 100, 100]));
        let tile = TileRect { x: 0, y: 0, w: 1, h: 1 };
        let masked = mask_tile(&image, &tile, FillPolicy::Mean).unwrap();
        assert_eq!(masked.get_pixel(0, 0).0, [20, 50, 150]);
        assert_eq!(masked.get_pixel(1, 0).0, [30, 100, 100]);
    }

    #[test]
    fn mask_out_of_bounds_rejected() {
        let image = gradient_image(10, 10);
        let tile = TileRect { x: 5, y: 5, w: 6, h: 2 };
        assert!(matches!(
            mask_tile(&image, &tile, FillPolicy::Black),
            Err(TilenseError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn vote_unanimity_and_majority() {
        let (answer, votes, low) = majority_vote(&[Polyp; 5]);
        assert_eq!((answer, low), (Polyp, false));
        assert_eq!(votes[&Polyp], 5);

        let (answer, _, low) =
            majority_vote(&[Polyp, Polyp, NormalMucosa, Polyp, NormalMucosa]);
        assert_eq!((answer, low), (Polyp, false));
    }

    #[test]
    fn vote_tie_breaks_lexicographically_and_flags() {
        // 2-2-1: "Normal" < "Polyp" as strings.
        let (answer, votes, low) =
            majority_vote(&[Polyp, NormalMucosa, Polyp, NormalMucosa, NoAnswer]);
        assert_eq!(answer, NormalMucosa);
        assert!(low);
        assert_eq!(votes[&NoAnswer], 1);
        // "2OP" sorts before any letter.
        let (answer, _, low) = majority_vote(&[TaskLabel::TwoOptions, NoAnswer]);
        assert_eq!(answer, TaskLabel::TwoOptions);
        assert!(low);
    }

    fn scores_with(per_tile: Vec<u32>, n_runs: u32) -> TileScores {
        TileScores {
            n_runs,
            base_answer: Polyp,
            base_votes: BTreeMap::from([(Polyp, n_runs)]),
            low_confidence: false,
            per_tile,
        }
    }

    #[test]
    fn heat_zero_and_saturated() {
        let grid = make_grid(12, 12).unwrap();
        let zero = pixel_heat(&grid, &scores_with(vec![0; 9], 5));
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let full = pixel_heat(&grid, &scores_with(vec![5; 9], 5));
        assert!(full.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn heat_single_hot_tile_dilutes_with_coverage() {
        let grid = make_grid(300, 300).unwrap();
        let mut per_tile = vec![0; 9];
        per_tile[0] = 5;
        let heat = pixel_heat(&grid, &scores_with(per_tile, 5));
        // Top-left corner: covered by tile 0 alone → full heat.
        assert_eq!(heat.get(0, 0), 1.0);
        // Center: four covering tiles, one hot → wait, tile 0 does not
        // reach the center; expect 0 there.
        assert_eq!(heat.get(150, 150), 0.0);
        // (100,100): covered by tiles 0,1,3,4 → hot share 1/4.
        assert!((heat.get(100, 100) - 0.25).abs() < 1e-6);
        assert!(heat.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn render_zero_heat_reproduces_input() {
        let dir = TempDir::new().unwrap();
        let image = gradient_image(24, 16);
        let grid = make_grid(24, 16).unwrap();
        let heat = pixel_heat(&grid, &scores_with(vec![0; 9], 5));
        let path = dir.path().join("x.tilense.png");
        render_heatmap(&image, &heat, &path).unwrap();
        let written = image::open(&path).unwrap().into_rgb8();
        assert_eq!(written.as_raw(), image.as_raw());
    }

    #[test]
    fn render_saturated_heat_tints_red() {
        let dir = TempDir::new().unwrap();
        let image = RgbImage::from_pixel(10, 10, image::Rgb([100, 100, 100]));
        let grid = make_grid(10, 10).unwrap();
        let heat = pixel_heat(&grid, &scores_with(vec![5; 9], 5));
        let path = dir.path().join("x.tilense.png");
        render_heatmap(&image, &heat, &path).unwrap();
        let written = image::open(&path).unwrap().into_rgb8();
        let pixel = written.get_pixel(5, 5).0;
        // 40% gray + 60% pure red.
        assert_eq!(pixel, [193, 40, 40]);
    }

    #[test]
    fn render_rejects_size_mismatch() {
        let image = gradient_image(10, 10);
        let grid = make_grid(12, 12).unwrap();
        let heat = pixel_heat(&grid, &scores_with(vec![0; 9], 5));
        let result = render_heatmap(&image, &heat, Path::new("/tmp/unused.png"));
        assert!(matches!(result, Err(TilenseError::SizeMismatch { .. })));
    }

    fn detect_template() -> PromptTemplate {
        PromptRegistry::builtin().get(TemplateId::SimpleDetect).clone()
    }

    fn session<'a>(
        backend: &'a dyn ChatBackend,
        template: &'a PromptTemplate,
        vocab: &'a Vocabulary,
        ledger: Option<&'a RunLedger>,
    ) -> TilenseSession<'a> {
        TilenseSession {
            backend,
            cache: None,
            cache_mode: CacheMode::Off,
            ledger,
            vocab,
            template,
            n_runs: 5,
            fill: FillPolicy::Black,
        }
    }

    #[test]
    fn constant_backend_scores_zero_everywhere() {
        let backend = MockBackend::with_default("There is a polyp.");
        let template = detect_template();
        let vocab = Vocabulary::builtin();
        let session = session(&backend, &template, &vocab, None);
        let image = RgbImage::from_pixel(40, 40, image::Rgb([180, 40, 40]));
        let sidecar = session.analyze("img0", &image).unwrap();
        assert_eq!(sidecar.base_answer, Polyp);
        assert!(!sidecar.low_confidence);
        assert_eq!(sidecar.per_tile, vec![0; 9]);
        assert_eq!(backend.calls(), 50);
        let heat = pixel_heat(&sidecar.grid, &sidecar.scores());
        assert!(heat.values().iter().all(|&v| v == 0.0));
    }

    /// Backend that answers "polyp" unless the center pixel is masked out.
    fn center_sensitive_backend() -> MockBackend {
        MockBackend::with_fn(|conversation, _| {
            let bytes = conversation.turns[0].image.as_ref()?;
            let decoded = image::load_from_memory(bytes).ok()?.into_rgb8();
            let center = decoded.get_pixel(150, 150).0;
            Some(if center == [0, 0, 0] {
                "This looks like normal mucosa.".to_string()
            } else {
                "There is a polyp.".to_string()
            })
        })
    }

    #[test]
    fn center_sensitive_backend_lights_the_four_covering_tiles() {
        let backend = center_sensitive_backend();
        let template = detect_template();
        let vocab = Vocabulary::builtin();
        let dir = TempDir::new().unwrap();
        let ledger = RunLedger::open(dir.path().join("run.jsonl")).unwrap();
        let session = session(&backend, &template, &vocab, Some(&ledger));
        let image = RgbImage::from_pixel(300, 300, image::Rgb([200, 60, 60]));
        let sidecar = session.analyze("center", &image).unwrap();

        assert_eq!(sidecar.base_answer, Polyp);
        // Tiles at offsets (75|150, 75|150) contain pixel (150,150).
        let expected: Vec<u32> = (0..9)
            .map(|i| if [4, 5, 7, 8].contains(&i) { 5 } else { 0 })
            .collect();
        assert_eq!(sidecar.per_tile, expected);

        // Call budget: n_runs · (1 + 9), all ledgered.
        let entries = RunLedger::read_entries(ledger.path()).unwrap();
        assert_eq!(entries.len(), 50);

        // All heat mass inside the union of the four hot tiles.
        let heat = pixel_heat(&sidecar.grid, &sidecar.scores());
        for y in 0..300 {
            for x in 0..300 {
                let hot = sidecar.grid.tiles[4].contains(x, y)
                    || sidecar.grid.tiles[5].contains(x, y)
                    || sidecar.grid.tiles[7].contains(x, y)
                    || sidecar.grid.tiles[8].contains(x, y);
                if !hot {
                    assert_eq!(heat.get(x, y), 0.0, "stray heat at ({x},{y})");
                }
            }
        }
        assert!(heat.get(299, 299) > 0.0);
    }

    #[test]
    fn sidecar_outputs_round_trip_and_are_deterministic() {
        let template = detect_template();
        let vocab = Vocabulary::builtin();
        let image = RgbImage::from_pixel(300, 300, image::Rgb([200, 60, 60]));
        let dir = TempDir::new().unwrap();

        let mut written: Vec<Vec<u8>> = Vec::new();
        for run in 0..2 {
            let backend = center_sensitive_backend();
            let session = session(&backend, &template, &vocab, None);
            let sidecar = session.analyze("rep", &image).unwrap();
            let out = dir.path().join(format!("run{run}"));
            let (png, json) = write_outputs(&sidecar, &image, &out).unwrap();
            assert!(png.ends_with("rep.tilense.png"));
            let parsed: TilenseSidecar =
                serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
            assert_eq!(parsed, sidecar);
            written.push(std::fs::read(&json).unwrap());
        }
        assert_eq!(written[0], written[1], "sidecars must be bit-identical");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Raising one tile's flip count never lowers any pixel's heat.
        #[test]
        fn heat_is_monotone_in_tile_scores(
            w in 8u32..40,
            h in 8u32..40,
            scores in prop::collection::vec(0u32..=5, 9),
            bump in 0usize..9,
        ) {
            let grid = make_grid(w, h).unwrap();
            let base = pixel_heat(&grid, &scores_with(scores.clone(), 5));
            let mut raised = scores;
            raised[bump] = (raised[bump] + 1).min(5);
            let after = pixel_heat(&grid, &scores_with(raised, 5));
            for (a, b) in base.values().iter().zip(after.values()) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn heat_stays_in_unit_interval(
            w in 8u32..32,
            h in 8u32..32,
            scores in prop::collection::vec(0u32..=5, 9),
        ) {
            let grid = make_grid(w, h).unwrap();
            let heat = pixel_heat(&grid, &scores_with(scores, 5));
            for &v in heat.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
