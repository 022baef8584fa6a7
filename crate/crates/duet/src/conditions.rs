//! Spatial-aware condition types: layouts, keypoint groups, segmentation
//! maps, the transfer function that collapses any of them to a layout, and
//! mask rasterization.
//!
//! All coordinates are normalized to `[0, 1]` with `x` growing rightwards and
//! `y` downwards. A grid cell `(r, c)` on an `H x W` raster owns the center
//! `((c + 0.5) / W, (r + 0.5) / H)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding applied per axis when a condition collapses to a zero extent
/// (e.g. a single keypoint).
pub const DEGENERATE_EXTENT_PADDING: f64 = 0.05;

/// An axis-aligned box bound to one object token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub token_index: usize,
}

impl LayoutBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, token_index: usize) -> Result<Self> {
        let b = Self { x0, y0, x1, y1, token_index };
        b.validate()?;
        Ok(b)
    }

    /// Build from possibly disordered, possibly out-of-range corners, the way
    /// generated layouts arrive. Swaps inverted axes and clamps to `[0, 1]`,
    /// reporting through `warnings`.
    pub fn normalized(
        mut x0: f64,
        mut y0: f64,
        mut x1: f64,
        mut y1: f64,
        token_index: usize,
        warnings: &mut Vec<String>,
    ) -> Result<Self> {
        if x1 < x0 {
            std::mem::swap(&mut x0, &mut x1);
            warnings.push(format!("box for token {token_index}: swapped x0/x1"));
        }
        if y1 < y0 {
            std::mem::swap(&mut y0, &mut y1);
            warnings.push(format!("box for token {token_index}: swapped y0/y1"));
        }
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        if [x0, y0, x1, y1].iter().any(|v| *v < 0.0 || *v > 1.0) {
            warnings.push(format!("box for token {token_index}: clamped to [0,1]"));
        }
        Self::new(clamp(x0), clamp(y0), clamp(x1), clamp(y1), token_index)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.x0.is_finite()
            && self.y0.is_finite()
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= 1.0
            && self.y1 <= 1.0;
        if !ok {
            return Err(Error::DegenerateBox(format!(
                "({}, {}, {}, {}) for token {}",
                self.x0, self.y0, self.x1, self.y1, self.token_index
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }
}

/// Ordered list of boxes, one per object token.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    boxes: Vec<LayoutBox>,
}

impl Layout {
    pub fn new(boxes: Vec<LayoutBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::EmptyCondition("layout needs at least one box".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for b in &boxes {
            b.validate()?;
            if !seen.insert(b.token_index) {
                return Err(Error::InvalidConfig(format!(
                    "layout binds token {} twice",
                    b.token_index
                )));
            }
        }
        Ok(Self { boxes })
    }

    pub fn boxes(&self) -> &[LayoutBox] {
        &self.boxes
    }

    pub fn box_for_token(&self, token_index: usize) -> Option<&LayoutBox> {
        self.boxes.iter().find(|b| b.token_index == token_index)
    }
}

/// Keypoint groups: `(token_index, points)` with normalized points.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub groups: Vec<(usize, Vec<(f64, f64)>)>,
}

impl KeypointSet {
    pub fn new(groups: Vec<(usize, Vec<(f64, f64)>)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyCondition("keypoint set has no groups".into()));
        }
        for (tok, pts) in &groups {
            if pts.is_empty() {
                return Err(Error::EmptyCondition(format!(
                    "keypoint group for token {tok} is empty"
                )));
            }
            for &(x, y) in pts {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::InvalidConfig(format!(
                        "keypoint ({x}, {y}) outside [0,1]^2"
                    )));
                }
            }
        }
        Ok(Self { groups })
    }
}

/// Label grid; 0 is background, nonzero labels address object tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: Array2<usize>,
}

impl SegmentationMap {
    pub fn new(labels: Array2<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyCondition("segmentation map is empty".into()));
        }
        Ok(Self { labels })
    }

    fn distinct_labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> =
            self.labels.iter().copied().filter(|&l| l != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Any condition the transfer function accepts.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialCondition {
    Layout(Layout),
    Keypoints(KeypointSet),
    Segmentation(SegmentationMap),
}

/// Strictly binary `H x W` grid stored as 0.0 / 1.0 for elementwise math.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Array2<f64>,
}

impl BinaryMask {
    pub fn from_grid(grid: Array2<f64>) -> Result<Self> {
        if grid.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Rasterize a box: cell on iff its center lies inside the (closed) box.
/// Sub-cell boxes that trap no center snap to the cell nearest the box
/// center, so every mask carries at least one 1.
pub fn rasterize(bx: &LayoutBox, height: usize, width: usize) -> Result<BinaryMask> {
    bx.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("raster dimensions must be positive".into()));
    }
    let mut grid = Array2::zeros((height, width));
    let mut any = false;
    for r in 0..height {
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            let cy = (r as f64 + 0.5) / height as f64;
            if bx.contains(cx, cy) {
                grid[[r, c]] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (bx_cx, bx_cy) = bx.center();
        let c = ((bx_cx * width as f64 - 0.5).round().clamp(0.0, (width - 1) as f64)) as usize;
        let r = ((bx_cy * height as f64 - 0.5).round().clamp(0.0, (height - 1) as f64)) as usize;
        grid[[r, c]] = 1.0;
    }
    BinaryMask::from_grid(grid)
}

/// The transfer function: collapse a spatial condition to the axis-aligned
/// boxes spanning the min/max coordinates of each group or segment. Zero
/// extents are padded by [`DEGENERATE_EXTENT_PADDING`] per affected axis.
pub fn transfer(cond: &SpatialCondition) -> Result<Layout> {
    match cond {
        SpatialCondition::Layout(l) => Ok(l.clone()),
        SpatialCondition::Keypoints(ks) => {
            let mut boxes = Vec::with_capacity(ks.groups.len());
            for (tok, pts) in &ks.groups {
                if pts.is_empty() {
                    return Err(Error::EmptyCondition(format!(
                        "keypoint group for token {tok} is empty"
                    )));
                }
                let xs = pts.iter().map(|p| p.0);
                let ys = pts.iter().map(|p| p.1);
                let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
                let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
                boxes.push(pad_degenerate(x0, y0, x1, y1, *tok)?);
            }
            Layout::new(boxes)
        }
        SpatialCondition::Segmentation(seg) => {
            let labels = seg.distinct_labels();
            if labels.is_empty() {
                return Err(Error::EmptyCondition(
                    "segmentation map has no nonzero labels".into(),
                ));
            }
            let (h, w) = seg.labels.dim();
            let mut boxes = Vec::with_capacity(labels.len());
            for label in labels {
                let mut rmin = usize::MAX;
                let mut rmax = 0usize;
                let mut cmin = usize::MAX;
                let mut cmax = 0usize;
                for ((r, c), &l) in seg.labels.indexed_iter() {
                    if l == label {
                        rmin = rmin.min(r);
                        rmax = rmax.max(r);
                        cmin = cmin.min(c);
                        cmax = cmax.max(c);
                    }
                }
                // Cell outer edges in normalized coordinates, so every cell
                // of the segment lies inside the box.
                boxes.push(LayoutBox::new(
                    cmin as f64 / w as f64,
                    rmin as f64 / h as f64,
                    (cmax + 1) as f64 / w as f64,
                    (rmax + 1) as f64 / h as f64,
                    label,
                )?);
            }
            Layout::new(boxes)
        }
    }
}

fn pad_degenerate(x0: f64, y0: f64, x1: f64, y1: f64, token: usize) -> Result<LayoutBox> {
    let d = DEGENERATE_EXTENT_PADDING;
    let (x0, x1) = if x1 - x0 < 1e-12 {
        ((x0 - d).max(0.0), (x1 + d).min(1.0))
    } else {
        (x0, x1)
    };
    let (y0, y1) = if y1 - y0 < 1e-12 {
        ((y0 - d).max(0.0), (y1 + d).min(1.0))
    } else {
        (y0, y1)
    };
    LayoutBox::new(x0, y0, x1, y1, token)
}

// ---------------------------------------------------------------------------
// Interchange formats
// ---------------------------------------------------------------------------

/// One entry of the layout JSON schema:
/// `{ "object": "cat", "box": [x0, y0, x1, y1] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutJsonEntry {
    pub object: String,
    #[serde(rename = "box")]
    pub corners: [f64; 4],
}

/// Parse layout JSON against a resolver mapping object strings to token
/// indices. Inverted or out-of-range boxes are repaired with warnings.
pub fn layout_from_json(
    json: &str,
    resolve: impl Fn(&str) -> Option<usize>,
    warnings: &mut Vec<String>,
) -> Result<Layout> {
    let entries: Vec<LayoutJsonEntry> =
        serde_json::from_str(json).map_err(|e| Error::LayoutParse {
            message: e.to_string(),
            raw: json.chars().take(400).collect(),
        })?;
    let mut boxes = Vec::with_capacity(entries.len());
    for entry in &entries {
        let token = resolve(&entry.object).ok_or_else(|| Error::LayoutParse {
            message: format!("object {:?} does not match any prompt token", entry.object),
            raw: json.chars().take(400).collect(),
        })?;
        let [x0, y0, x1, y1] = entry.corners;
        boxes.push(LayoutBox::normalized(x0, y0, x1, y1, token, warnings)?);
    }
    Layout::new(boxes)
}

pub fn layout_to_json(layout: &Layout, name_of: impl Fn(usize) -> String) -> String {
    let entries: Vec<LayoutJsonEntry> = layout
        .boxes()
        .iter()
        .map(|b| LayoutJsonEntry {
            object: name_of(b.token_index),
            corners: [b.x0, b.y0, b.x1, b.y1],
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("layout entries serialize")
}

/// One keypoint-JSON entry: `{ "object": "cat", "points": [[x, y], ...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointJsonEntry {
    pub object: String,
    pub points: Vec<[f64; 2]>,
}

pub fn keypoints_from_json(
    json: &str,
    resolve: impl Fn(&str) -> Option<usize>,
) -> Result<KeypointSet> {
    let entries: Vec<KeypointJsonEntry> =
        serde_json::from_str(json).map_err(|e| Error::LayoutParse {
            message: e.to_string(),
            raw: json.chars().take(400).collect(),
        })?;
    let mut groups = Vec::with_capacity(entries.len());
    for e in &entries {
        let token = resolve(&e.object).ok_or_else(|| Error::LayoutParse {
            message: format!("object {:?} does not match any prompt token", e.object),
            raw: json.chars().take(400).collect(),
        })?;
        groups.push((token, e.points.iter().map(|p| (p[0], p[1])).collect()));
    }
    KeypointSet::new(groups)
}

/// Read a PGM (P2 ASCII or P5 binary, maxval <= 255) as a label grid.
pub fn segmentation_from_pgm(bytes: &[u8]) -> Result<SegmentationMap> {
    let mut header_items = Vec::new();
    let mut pos = 0usize;
    // Collect magic, width, height, maxval while skipping comments.
    while header_items.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::FileFormat("truncated PGM header".into()));
        }
        if bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        header_items.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::FileFormat("non-ascii PGM header".into()))?
                .to_string(),
        );
    }
    let magic = header_items[0].as_str();
    let w: usize = header_items[1]
        .parse()
        .map_err(|_| Error::FileFormat("bad PGM width".into()))?;
    let h: usize = header_items[2]
        .parse()
        .map_err(|_| Error::FileFormat("bad PGM height".into()))?;
    let maxval: usize = header_items[3]
        .parse()
        .map_err(|_| Error::FileFormat("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::FileFormat(format!("unsupported PGM maxval {maxval}")));
    }
    let mut values = Vec::with_capacity(w * h);
    match magic {
        "P2" => {
            let body = std::str::from_utf8(&bytes[pos..])
                .map_err(|_| Error::FileFormat("non-ascii P2 body".into()))?;
            for tok in body.split_ascii_whitespace().take(w * h) {
                values.push(
                    tok.parse::<usize>()
                        .map_err(|_| Error::FileFormat("bad P2 sample".into()))?,
                );
            }
        }
        "P5" => {
            pos += 1; // single whitespace after maxval
            if bytes.len() < pos + w * h {
                return Err(Error::FileFormat("truncated P5 body".into()));
            }
            values.extend(bytes[pos..pos + w * h].iter().map(|&b| b as usize));
        }
        other => {
            return Err(Error::FileFormat(format!("unsupported PGM magic {other:?}")));
        }
    }
    if values.len() != w * h {
        return Err(Error::FileFormat("PGM body shorter than header promises".into()));
    }
    let labels = Array2::from_shape_vec((h, w), values)
        .map_err(|e| Error::FileFormat(e.to_string()))?;
    SegmentationMap::new(labels)
}

pub fn segmentation_to_pgm(seg: &SegmentationMap) -> Vec<u8> {
    let (h, w) = seg.labels.dim();
    let maxval = seg.labels.iter().copied().max().unwrap_or(1).max(1);
    let mut out = format!("P2\n{w} {h}\n{maxval}\n");
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| seg.labels[[r, c]].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}
