//! Bounding-box algebra: IoU, overlap merging, normalization to the 0-100
//! integer text format, circle/mask conversion, and parsing boxes back out of
//! generated text.
//!
//! Boxes use the half-open pixel-edge convention: `(x1, y1)` is the top-left
//! corner and `(x2, y2)` the exclusive bottom-right edge, so
//! `area = (x2 - x1) * (y2 - y1)` is exact for integer boxes. Adapters that
//! ingest inclusive-corner sources add 1 to the far edge before constructing
//! a [`BBox`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel-space rectangle with non-negative real coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let reason = if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            Some("coordinates must be finite")
        } else if x1 < 0.0 || y1 < 0.0 {
            Some("coordinates must be non-negative")
        } else if x2 < x1 {
            Some("x2 < x1")
        } else if y2 < y1 {
            Some("y2 < y1")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox { x1, y1, x2, y2, reason }),
            None => Ok(BBox { x1, y1, x2, y2 }),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Smallest box containing both `self` and `other`.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn sort_key(&self) -> (u64, u64, u64, u64) {
        // Coordinates are non-negative, so to_bits is order-preserving.
        (
            self.x1.to_bits(),
            self.y1.to_bits(),
            self.x2.to_bits(),
            self.y2.to_bits(),
        )
    }
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Intersection over the smaller box's area. Zero if either box has zero
/// area, so containment of a positive-area box always scores 1.
pub fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let min_area = a.area().min(b.area());
    if min_area <= 0.0 {
        0.0
    } else {
        a.intersection_area(b) / min_area
    }
}

/// Repeatedly replaces any pair whose overlap fraction strictly exceeds
/// `threshold` by their minimal enclosing box, until no pair qualifies.
///
/// The working set is kept sorted by coordinates so the merge order, and
/// therefore the fixed point, does not depend on input permutation. A pair
/// overlapping by exactly `threshold` does not merge.
pub fn merge_overlapping(boxes: &[BBox], threshold: f64) -> Result<Vec<BBox>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::BadMetricInput(format!(
            "merge threshold must be in [0, 1], got {threshold}"
        )));
    }
    let mut work: Vec<BBox> = boxes.to_vec();
    work.sort_by_key(BBox::sort_key);
    'outer: loop {
        for i in 0..work.len() {
            for j in (i + 1)..work.len() {
                if overlap_fraction(&work[i], &work[j]) > threshold {
                    let merged = work[i].enclosing(&work[j]);
                    work.remove(j);
                    work.remove(i);
                    work.push(merged);
                    work.sort_by_key(BBox::sort_key);
                    continue 'outer;
                }
            }
        }
        break;
    }
    Ok(work)
}

/// Rectangle scaled to integer coordinates in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct NormalizedBBox {
    pub x1: u8,
    pub y1: u8,
    pub x2: u8,
    pub y2: u8,
}

impl NormalizedBBox {
    pub fn new(x1: u8, y1: u8, x2: u8, y2: u8) -> Result<Self> {
        if x2 > 100 || y2 > 100 || x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: x2 as f64,
                y2: y2 as f64,
                reason: "normalized coordinates must satisfy 0 <= x1 <= x2 <= 100",
            });
        }
        Ok(NormalizedBBox { x1, y1, x2, y2 })
    }

    /// The exact text form embedded in conversations: `[x1, y1, x2, y2]`.
    pub fn render(&self) -> String {
        format!("[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }

    pub fn to_bbox(&self) -> BBox {
        BBox {
            x1: self.x1 as f64,
            y1: self.y1 as f64,
            x2: self.x2 as f64,
            y2: self.y2 as f64,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }
}

impl TryFrom<[u8; 4]> for NormalizedBBox {
    type Error = Error;
    fn try_from(v: [u8; 4]) -> Result<Self> {
        NormalizedBBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormalizedBBox> for [u8; 4] {
    fn from(b: NormalizedBBox) -> [u8; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Outcome of [`normalize`], with warning flags the caller can surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalized {
    pub bbox: NormalizedBBox,
    /// Input exceeded image bounds and was clamped.
    pub clamped: bool,
    /// Result has zero area; retained rather than dropped.
    pub degenerate: bool,
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero, which is the pinned rule.
    v.round()
}

/// Scales a pixel box to integer coordinates in `[0, 100]`.
///
/// Each coordinate is multiplied by `100 / dimension`, rounded half away
/// from zero, then clamped to `[0, 100]`.
pub fn normalize(b: &BBox, image_w: f64, image_h: f64) -> Result<Normalized> {
    if !image_w.is_finite() || !image_h.is_finite() || image_w <= 0.0 || image_h <= 0.0 {
        return Err(Error::BadImageSize {
            width: image_w,
            height: image_h,
        });
    }
    let clamped = b.x2 > image_w || b.y2 > image_h;
    let scale = |v: f64, dim: f64| -> u8 {
        let scaled = round_half_away(v * 100.0 / dim);
        scaled.clamp(0.0, 100.0) as u8
    };
    let x1 = scale(b.x1.min(image_w), image_w);
    let y1 = scale(b.y1.min(image_h), image_h);
    let x2 = scale(b.x2.min(image_w), image_w);
    let y2 = scale(b.y2.min(image_h), image_h);
    let bbox = NormalizedBBox::new(x1, y1, x2.max(x1), y2.max(y1))?;
    Ok(Normalized {
        bbox,
        clamped,
        degenerate: bbox.is_degenerate(),
    })
}

/// Smallest box containing the circle at `(cx, cy)` with radius `r`,
/// clamped at the image origin.
pub fn circle_to_bbox(cx: f64, cy: f64, r: f64) -> Result<BBox> {
    if r < 0.0 {
        return Err(Error::NegativeRadius(r));
    }
    BBox::new(
        (cx - r).max(0.0),
        (cy - r).max(0.0),
        (cx + r).max(0.0),
        (cy + r).max(0.0),
    )
}

/// Binary mask stored as alternating run lengths over row-major pixel order,
/// starting with a background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        let expected = width as u64 * height as u64;
        let sum: u64 = runs.iter().map(|&r| r as u64).sum();
        if sum != expected {
            return Err(Error::RleMismatch {
                width,
                height,
                expected,
                sum,
            });
        }
        Ok(RleMask { width, height, runs })
    }

    fn decode(&self) -> Vec<bool> {
        let mut grid = Vec::with_capacity((self.width * self.height) as usize);
        let mut fg = false;
        for &run in &self.runs {
            grid.extend(std::iter::repeat_n(fg, run as usize));
            fg = !fg;
        }
        grid
    }
}

/// One minimal enclosing box per 4-connected foreground component, in
/// canonical coordinate order.
pub fn mask_to_bboxes(mask: &RleMask) -> Vec<BBox> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let grid = mask.decode();
    let mut seen = vec![false; grid.len()];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..grid.len() {
        if !grid[start] || seen[start] {
            continue;
        }
        let (mut min_x, mut min_y) = (w, h);
        let (mut max_x, mut max_y) = (0usize, 0usize);
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            let mut visit = |n: usize| {
                if grid[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        boxes.push(BBox {
            x1: min_x as f64,
            y1: min_y as f64,
            x2: (max_x + 1) as f64,
            y2: (max_y + 1) as f64,
        });
    }
    boxes.sort_by_key(BBox::sort_key);
    boxes
}

/// Number of 4-connected foreground components in the mask.
pub fn mask_component_count(mask: &RleMask) -> usize {
    mask_to_bboxes(mask).len()
}

/// Extracts every well-formed `[x1, y1, x2, y2]` occurrence from free text,
/// in order of appearance. Internal whitespace is flexible; candidates with
/// values outside `[0, 100]` or unordered corners are skipped.
pub fn parse_bboxes_from_text(text: &str) -> Vec<NormalizedBBox> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'[' {
            i += 1;
            continue;
        }
        match parse_candidate(bytes, i + 1) {
            Some((bbox, end)) => {
                found.push(bbox);
                i = end;
            }
            None => i += 1,
        }
    }
    found
}

/// Parses `int , int , int , int ]` starting at `pos`; returns the box and
/// the index just past the closing bracket.
fn parse_candidate(bytes: &[u8], mut pos: usize) -> Option<(NormalizedBBox, usize)> {
    let mut values = [0u16; 4];
    for (slot, value) in values.iter_mut().enumerate() {
        pos = skip_ws(bytes, pos);
        let (v, next) = parse_int(bytes, pos)?;
        *value = v;
        pos = skip_ws(bytes, next);
        let expected = if slot < 3 { b',' } else { b']' };
        if pos >= bytes.len() || bytes[pos] != expected {
            return None;
        }
        pos += 1;
    }
    let [x1, y1, x2, y2] = values;
    if x2 > 100 || y2 > 100 || x1 > x2 || y1 > y2 {
        return None;
    }
    Some((
        NormalizedBBox {
            x1: x1 as u8,
            y1: y1 as u8,
            x2: x2 as u8,
            y2: y2 as u8,
        },
        pos,
    ))
}

fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() && (bytes[pos] == b' ' || bytes[pos] == b'\t') {
        pos += 1;
    }
    pos
}

fn parse_int(bytes: &[u8], mut pos: usize) -> Option<(u16, usize)> {
    let start = pos;
    let mut value: u32 = 0;
    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
        value = value * 10 + (bytes[pos] - b'0') as u32;
        if value > 1000 {
            return None;
        }
        pos += 1;
    }
    if pos == start {
        return None;
    }
    Some((value as u16, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_identical_boxes() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        assert_eq!(iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // Intersection 50, union 150; agrees with the pixel-counting oracle.
        let value = iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(5.0, 0.0, 15.0, 10.0));
        assert!((value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_zero_union_convention() {
        let p = bb(5.0, 5.0, 5.0, 5.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BBox::new(10.0, 0.0, 5.0, 10.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 5.0, 10.0).is_err());
    }

    #[test]
    fn overlap_fraction_cases() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlap_fraction(&a, &a), 1.0);
        // Strictly contained box.
        assert_eq!(overlap_fraction(&bb(2.0, 2.0, 6.0, 6.0), &a), 1.0);
        // Intersection 50, min area 100.
        assert_eq!(overlap_fraction(&a, &bb(5.0, 0.0, 15.0, 10.0)), 0.5);
    }

    #[test]
    fn merge_collapses_duplicates() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(merge_overlapping(&[a, a], 0.5).unwrap(), vec![a]);
    }

    #[test]
    fn merge_keeps_disjoint() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(50.0, 50.0, 60.0, 60.0);
        assert_eq!(merge_overlapping(&[b, a], 0.5).unwrap(), vec![a, b]);
    }

    #[test]
    fn merge_above_threshold() {
        // Fraction 0.6 > 0.5 merges into the enclosing box.
        let out = merge_overlapping(&[bb(0.0, 0.0, 10.0, 10.0), bb(4.0, 0.0, 14.0, 10.0)], 0.5).unwrap();
        assert_eq!(out, vec![bb(0.0, 0.0, 14.0, 10.0)]);
    }

    #[test]
    fn merge_exact_threshold_does_not_merge() {
        // Fraction exactly 0.5: "more than 50 percent" is strict.
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        assert_eq!(merge_overlapping(&[a, b], 0.5).unwrap(), vec![a, b]);
    }

    #[test]
    fn normalize_full_image() {
        let n = normalize(&bb(0.0, 0.0, 512.0, 512.0), 512.0, 512.0).unwrap();
        assert_eq!(n.bbox, NormalizedBBox::new(0, 0, 100, 100).unwrap());
        assert!(!n.clamped && !n.degenerate);
    }

    #[test]
    fn normalize_exact_quarters() {
        let n = normalize(&bb(128.0, 128.0, 384.0, 384.0), 512.0, 512.0).unwrap();
        assert_eq!(n.bbox, NormalizedBBox::new(25, 25, 75, 75).unwrap());
    }

    #[test]
    fn normalize_tiny_box_degenerates() {
        // 1/1000 scales to 0.1, rounds to 0.
        let n = normalize(&bb(0.0, 0.0, 1.0, 1.0), 1000.0, 1000.0).unwrap();
        assert_eq!(n.bbox, NormalizedBBox::new(0, 0, 0, 0).unwrap());
        assert!(n.degenerate);
    }

    #[test]
    fn normalize_clamps_out_of_bounds() {
        let n = normalize(&bb(0.0, 0.0, 600.0, 100.0), 512.0, 512.0).unwrap();
        assert!(n.clamped);
        assert_eq!(n.bbox.x2, 100);
    }

    #[test]
    fn normalize_rejects_zero_dimension() {
        assert!(normalize(&bb(0.0, 0.0, 1.0, 1.0), 0.0, 512.0).is_err());
    }

    #[test]
    fn circle_cases() {
        assert_eq!(circle_to_bbox(50.0, 50.0, 10.0).unwrap(), bb(40.0, 40.0, 60.0, 60.0));
        assert_eq!(circle_to_bbox(50.0, 50.0, 0.0).unwrap(), bb(50.0, 50.0, 50.0, 50.0));
        // Clamped at the origin.
        assert_eq!(circle_to_bbox(5.0, 5.0, 10.0).unwrap(), bb(0.0, 0.0, 15.0, 15.0));
        assert!(circle_to_bbox(5.0, 5.0, -1.0).is_err());
    }

    fn rect_mask(w: u32, h: u32, rects: &[(u32, u32, u32, u32)]) -> RleMask {
        let mut grid = vec![false; (w * h) as usize];
        for &(x1, y1, x2, y2) in rects {
            for y in y1..y2 {
                for x in x1..x2 {
                    grid[(y * w + x) as usize] = true;
                }
            }
        }
        let mut runs = Vec::new();
        let mut fg = false;
        let mut count = 0u32;
        for cell in grid {
            if cell == fg {
                count += 1;
            } else {
                runs.push(count);
                fg = cell;
                count = 1;
            }
        }
        runs.push(count);
        RleMask::new(w, h, runs).unwrap()
    }

    #[test]
    fn mask_empty() {
        let m = RleMask::new(4, 4, vec![16]).unwrap();
        assert!(mask_to_bboxes(&m).is_empty());
    }

    #[test]
    fn mask_single_rectangle() {
        // Pixels in columns 2..=7, rows 3..=9 enclose as (2,3,8,10).
        let m = rect_mask(12, 12, &[(2, 3, 8, 10)]);
        assert_eq!(mask_to_bboxes(&m), vec![bb(2.0, 3.0, 8.0, 10.0)]);
    }

    #[test]
    fn mask_two_components() {
        let m = rect_mask(20, 20, &[(1, 1, 4, 4), (10, 10, 15, 18)]);
        let boxes = mask_to_bboxes(&m);
        assert_eq!(boxes, vec![bb(1.0, 1.0, 4.0, 4.0), bb(10.0, 10.0, 15.0, 18.0)]);
        assert_eq!(mask_component_count(&m), 2);
    }

    #[test]
    fn mask_diagonal_pixels_are_separate_components() {
        // 4-connectivity: diagonal touch does not join.
        let m = rect_mask(4, 4, &[(0, 0, 1, 1), (1, 1, 2, 2)]);
        assert_eq!(mask_component_count(&m), 2);
    }

    #[test]
    fn rle_mismatch_rejected() {
        assert!(RleMask::new(4, 4, vec![10]).is_err());
    }

    #[test]
    fn parse_single_box() {
        let boxes = parse_bboxes_from_text("Pneumothorax at [25, 10, 60, 45].");
        assert_eq!(boxes, vec![NormalizedBBox::new(25, 10, 60, 45).unwrap()]);
    }

    #[test]
    fn parse_no_box() {
        assert!(parse_bboxes_from_text("no box here").is_empty());
    }

    #[test]
    fn parse_rejects_unordered_corners() {
        let boxes = parse_bboxes_from_text("[10,10,5,5] and [0,0,50,50]");
        assert_eq!(boxes, vec![NormalizedBBox::new(0, 0, 50, 50).unwrap()]);
    }

    #[test]
    fn parse_rejects_out_of_range() {
        assert!(parse_bboxes_from_text("[0, 0, 101, 50]").is_empty());
        assert!(parse_bboxes_from_text("[0, 0, 100, 100]").len() == 1);
    }

    #[test]
    fn parse_flexible_whitespace() {
        let boxes = parse_bboxes_from_text("[ 1 ,\t2 , 3 , 4 ]");
        assert_eq!(boxes, vec![NormalizedBBox::new(1, 2, 3, 4).unwrap()]);
    }

    #[test]
    fn render_parse_round_trip() {
        let b = NormalizedBBox::new(7, 0, 93, 100).unwrap();
        assert_eq!(parse_bboxes_from_text(&b.render()), vec![b]);
    }
}
