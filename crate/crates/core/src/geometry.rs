//! Face-box geometry, gap interpolation, and single-target IoU tracking.
//!
//! The tracker follows a two-step recipe: pick the target face as the first
//! detection whose mean IoU against detections in every *other* frame clears
//! a threshold (the seated participant barely moves, distractors are
//! transient), then follow it greedily by IoU forwards and backwards in time,
//! filling short detection gaps by linear interpolation.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box at frame {frame}: ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox {
        frame: usize,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    #[error("box at frame {frame} lies outside the {width}x{height} frame")]
    OutOfFrame {
        frame: usize,
        width: f64,
        height: f64,
    },
    #[error("detection at frame {frame} is beyond the stream's {frame_count} frames")]
    FrameOutOfRange { frame: usize, frame_count: usize },
    #[error("detection stream holds no detections")]
    NoTarget,
    #[error("seed box is not a detection of the stream")]
    SeedNotInStream,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(frame: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { frame, x1, y1, x2, y2 });
        }
        Ok(BoundingBox { frame, x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn same_coords(&self, other: &BoundingBox) -> bool {
        self.x1 == other.x1 && self.y1 == other.y1 && self.x2 == other.x2 && self.y2 == other.y2
    }

    fn lerp(a: &BoundingBox, b: &BoundingBox, frame: usize) -> BoundingBox {
        let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        let mix = |p: f64, q: f64| p + (q - p) * t;
        BoundingBox {
            frame,
            x1: mix(a.x1, b.x1),
            y1: mix(a.y1, b.y1),
            x2: mix(a.x2, b.x2),
            y2: mix(a.y2, b.y2),
        }
    }
}

/// Intersection over union of the two boxes' areas (frames are ignored).
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-frame face detections of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    frame_count: usize,
    frame_size: (f64, f64),
    frames: Vec<Vec<BoundingBox>>,
}

impl DetectionStream {
    /// `frame_size` is `(width, height)`. Boxes within a frame are kept in
    /// row-major order of their top-left corner.
    pub fn new(
        frame_count: usize,
        frame_size: (f64, f64),
        detections: impl IntoIterator<Item = BoundingBox>,
    ) -> Result<Self> {
        let (w, h) = frame_size;
        let mut frames = vec![Vec::new(); frame_count];
        for b in detections {
            if b.frame >= frame_count {
                return Err(GeometryError::FrameOutOfRange {
                    frame: b.frame,
                    frame_count,
                });
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(GeometryError::OutOfFrame {
                    frame: b.frame,
                    width: w,
                    height: h,
                });
            }
            frames[b.frame].push(b);
        }
        for f in &mut frames {
            f.sort_by(|a, b| a.y1.total_cmp(&b.y1).then(a.x1.total_cmp(&b.x1)));
        }
        Ok(DetectionStream {
            frame_count,
            frame_size,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn frame_size(&self) -> (f64, f64) {
        self.frame_size
    }

    pub fn frame(&self, index: usize) -> &[BoundingBox] {
        self.frames.get(index).map_or(&[], Vec::as_slice)
    }

    /// All detections in frame order, row-major within a frame.
    pub fn detections(&self) -> impl Iterator<Item = &BoundingBox> {
        self.frames.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of frames with at least one detection.
    pub fn detection_ratio(&self) -> f64 {
        if self.frame_count == 0 {
            return 0.0;
        }
        self.frames.iter().filter(|f| !f.is_empty()).count() as f64 / self.frame_count as f64
    }

    pub fn contains(&self, b: &BoundingBox) -> bool {
        self.frame(b.frame).iter().any(|d| d.same_coords(b))
    }
}

/// One box per frame for a single face, ordered by frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    boxes: Vec<BoundingBox>,
}

impl Track {
    /// Frames must be strictly increasing.
    pub fn new(boxes: Vec<BoundingBox>) -> Result<Self> {
        if let Some(w) = boxes.windows(2).find(|w| w[0].frame >= w[1].frame) {
            return Err(GeometryError::Parse {
                line: 0,
                reason: format!("track frames not increasing at frame {}", w[1].frame),
            });
        }
        Ok(Track { boxes })
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Box at `frame`, or the temporally nearest one (earlier wins ties).
    pub fn nearest(&self, frame: usize) -> Option<&BoundingBox> {
        match self.boxes.binary_search_by_key(&frame, |b| b.frame) {
            Ok(i) => Some(&self.boxes[i]),
            Err(i) => {
                let before = i.checked_sub(1).map(|j| &self.boxes[j]);
                let after = self.boxes.get(i);
                match (before, after) {
                    (Some(b), Some(a)) => {
                        if frame - b.frame <= a.frame - frame {
                            Some(b)
                        } else {
                            Some(a)
                        }
                    }
                    (b, a) => b.or(a),
                }
            }
        }
    }

    /// Fill every gap of `g` frames with `1 < g < max_gap` by inserting
    /// `g - 1` linearly interpolated boxes. Longer gaps stay empty.
    pub fn interpolate_gaps(&self, max_gap: usize) -> Track {
        let mut out = Vec::with_capacity(self.boxes.len());
        for (i, b) in self.boxes.iter().enumerate() {
            out.push(*b);
            if let Some(next) = self.boxes.get(i + 1) {
                let gap = next.frame - b.frame;
                if gap > 1 && gap < max_gap {
                    out.extend((b.frame + 1..next.frame).map(|f| BoundingBox::lerp(b, next, f)));
                }
            }
        }
        Track { boxes: out }
    }
}

/// Default gap limit: one second of 25 fps video.
pub const MAX_INTERPOLATION_GAP: usize = 25;
pub const TARGET_IOU_THRESHOLD: f64 = 0.2;

/// Mean IoU of `candidate` against every detection outside its own frame.
fn mean_iou_elsewhere(stream: &DetectionStream, candidate: &BoundingBox) -> f64 {
    let (sum, n) = stream
        .detections()
        .filter(|d| d.frame != candidate.frame)
        .fold((0.0, 0usize), |(s, n), d| (s + iou(candidate, d), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// The first detection whose mean IoU against detections in the other frames
/// exceeds `threshold`; failing that, the detection with the highest mean IoU.
pub fn identify_target(stream: &DetectionStream, threshold: f64) -> Result<BoundingBox> {
    let mut best: Option<(f64, BoundingBox)> = None;
    for d in stream.detections() {
        let score = mean_iou_elsewhere(stream, d);
        if score > threshold {
            return Ok(*d);
        }
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, *d));
        }
    }
    best.map(|(_, d)| d).ok_or(GeometryError::NoTarget)
}

fn best_match<'a>(candidates: &'a [BoundingBox], last: &BoundingBox) -> Option<&'a BoundingBox> {
    let mut best: Option<(f64, &BoundingBox)> = None;
    for c in candidates {
        let score = iou(c, last);
        if score > 0.0 && best.is_none_or(|(s, _)| score > s) {
            best = Some((score, c));
        }
    }
    best.map(|(_, c)| c)
}

/// Greedy IoU association from `seed` forwards and backwards in time,
/// followed by gap interpolation.
pub fn track_target(stream: &DetectionStream, seed: &BoundingBox) -> Result<Track> {
    if !stream.contains(seed) {
        return Err(GeometryError::SeedNotInStream);
    }
    let mut backward = Vec::new();
    let mut last = *seed;
    for f in (0..seed.frame).rev() {
        if let Some(b) = best_match(stream.frame(f), &last) {
            backward.push(*b);
            last = *b;
        }
    }
    backward.reverse();
    backward.push(*seed);
    let mut last = *seed;
    for f in seed.frame + 1..stream.frame_count() {
        if let Some(b) = best_match(stream.frame(f), &last) {
            backward.push(*b);
            last = *b;
        }
    }
    Ok(Track { boxes: backward }.interpolate_gaps(MAX_INTERPOLATION_GAP))
}

/// Parse `frame x1 y1 x2 y2` records, one per line. Blank lines and lines
/// starting with `#` are skipped; records must be sorted by frame.
pub fn parse_detections(text: &str) -> Result<Vec<BoundingBox>> {
    let mut out: Vec<BoundingBox> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let err = |reason: String| GeometryError::Parse {
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame index {:?}", fields[0])))?;
        let mut c = [0.0; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| err(format!("bad coordinate {f:?}")))?;
        }
        let b = BoundingBox::new(frame, c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string()))?;
        if out.last().is_some_and(|prev| prev.frame > frame) {
            return Err(err("records not sorted by frame".into()));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn format_detections<'a>(boxes: impl IntoIterator<Item = &'a BoundingBox>) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {} {} {} {}", b.frame, b.x1, b.y1, b.x2, b.y2);
    }
    s
}
