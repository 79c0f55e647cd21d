//! Frames, sliding windows, the RGB-difference motion signal and a synthetic
//! labelled video generator with tolerance degrees.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grayscale frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "Frame::new",
                expected: vec![height, width],
                actual: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Raw frames.
    Appearance,
    /// Adjacent-frame differences.
    Motion,
}

/// `window.len()` consecutive frames and the frame that follows them.
#[derive(Clone, Copy, Debug)]
pub struct VideoSample<'a> {
    pub window: &'a [Frame],
    pub target: &'a Frame,
    pub stream: StreamKind,
    pub video_id: usize,
    /// Index of the first window frame in the source sequence.
    pub index: usize,
}

impl VideoSample<'_> {
    /// Index of the target within the source sequence.
    pub fn target_index(&self) -> usize {
        self.index + self.window.len()
    }
}

/// Slides a window of `k` frames over `video`; sample `t` covers `[t, t+k)`
/// and predicts frame `t+k`.
pub fn make_windows(
    video: &[Frame],
    k: usize,
    stream: StreamKind,
    video_id: usize,
) -> Result<Vec<VideoSample<'_>>> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "window length must be positive".into(),
        ));
    }
    if video.len() < k + 1 {
        return Err(Error::VideoTooShort {
            frames: video.len(),
            window: k,
            needed: k + 1,
        });
    }
    Ok((0..video.len() - k)
        .map(|t| VideoSample {
            window: &video[t..t + k],
            target: &video[t + k],
            stream,
            video_id,
            index: t,
        })
        .collect())
}

/// Adjacent-frame differences clipped to `[-1, 1]` and mapped to `[0, 1]`
/// by `(d + 1) / 2`. Output `n` is derived from frames `n` and `n + 1`.
pub fn rgb_difference(video: &[Frame]) -> Result<Vec<Frame>> {
    if video.len() < 2 {
        return Err(Error::VideoTooShort {
            frames: video.len(),
            window: 1,
            needed: 2,
        });
    }
    video
        .windows(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            if a.height != b.height || a.width != b.width {
                return Err(Error::ShapeMismatch {
                    context: "rgb_difference",
                    expected: vec![a.height, a.width],
                    actual: vec![b.height, b.width],
                });
            }
            let pixels = a
                .pixels
                .iter()
                .zip(&b.pixels)
                .map(|(p, q)| ((q - p).clamp(-1.0, 1.0) + 1.0) / 2.0)
                .collect();
            Ok(Frame {
                height: a.height,
                width: a.width,
                pixels,
            })
        })
        .collect()
}

/// Recovers frame `n + 1` from frame `n` and difference `n`.
pub fn undo_difference(previous: &Frame, difference: &Frame) -> Frame {
    let pixels = previous
        .pixels
        .iter()
        .zip(&difference.pixels)
        .map(|(p, d)| (p + (2.0 * d - 1.0)).clamp(0.0, 1.0))
        .collect();
    Frame {
        height: previous.height,
        width: previous.width,
        pixels,
    }
}

/// The frame sequence a stream consumes, and how its indices map back to
/// source frames.
pub fn stream_frames(video: &[Frame], stream: StreamKind) -> Result<Vec<Frame>> {
    match stream {
        StreamKind::Appearance => Ok(video.to_vec()),
        StreamKind::Motion => rgb_difference(video),
    }
}

/// Source frame index predicted by sample `index` of a stream with window `k`.
pub fn source_target_index(stream: StreamKind, index: usize, k: usize) -> usize {
    match stream {
        StreamKind::Appearance => index + k,
        // difference n spans frames n and n+1
        StreamKind::Motion => index + k + 1,
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Object classes, one per tolerance degree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Square,
    Circle,
    Triangle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [
        ObjectClass::Square,
        ObjectClass::Circle,
        ObjectClass::Triangle,
    ];

    fn bit(self) -> u8 {
        match self {
            Self::Square => 1,
            Self::Circle => 2,
            Self::Triangle => 4,
        }
    }

    /// The class whose appearance a degree newly tolerates.
    pub fn for_degree(degree: u32) -> Option<Self> {
        match degree {
            1 => Some(Self::Square),
            2 => Some(Self::Circle),
            3 => Some(Self::Triangle),
            _ => None,
        }
    }
}

/// Set of object classes visible in a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassSet(u8);

impl ClassSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn of(classes: &[ObjectClass]) -> Self {
        Self(classes.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn insert(&mut self, c: ObjectClass) {
        self.0 |= c.bit();
    }

    pub fn contains(self, c: ObjectClass) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn is_subset(self, other: ClassSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn classes(self) -> Vec<ObjectClass> {
        ObjectClass::ALL
            .into_iter()
            .filter(|c| self.contains(*c))
            .collect()
    }
}

/// Which classes count as normal at a tolerance degree.
///
/// Degree 1 tolerates only the base class; degree `d > 1` tolerates the base
/// class plus the class introduced at `d`, and nothing introduced at any other
/// degree.
pub fn allowed_classes(degree: u32) -> Result<ClassSet> {
    match ObjectClass::for_degree(degree) {
        Some(ObjectClass::Square) => Ok(ClassSet::of(&[ObjectClass::Square])),
        Some(c) => Ok(ClassSet::of(&[ObjectClass::Square, c])),
        None => Err(Error::UnknownDegree {
            degree,
            available: vec![1, 2, 3],
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoCounts {
    /// Training videos generated per tolerance degree.
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub squares_per_video: usize,
    pub square_size: (f64, f64),
    pub square_speed: (f64, f64),
    pub circle_radius: (f64, f64),
    pub triangle_size: (f64, f64),
    /// Frames an event object needs to cross the canvas.
    pub event_frames: (usize, usize),
    pub background: f64,
    pub foreground: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            squares_per_video: 2,
            square_size: (7.0, 9.0),
            square_speed: (0.5, 1.5),
            circle_radius: (4.0, 5.0),
            triangle_size: (10.0, 12.0),
            event_frames: (12, 18),
            background: 0.1,
            foreground: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub canvas: Canvas,
    pub n_videos: VideoCounts,
    pub frames_per_video: usize,
    /// Number of tolerance degrees (1 to 3).
    pub degrees: u32,
    pub seed: u64,
    #[serde(default)]
    pub motion: MotionConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas: Canvas {
                height: 64,
                width: 64,
            },
            n_videos: VideoCounts {
                train: 20,
                test: 10,
            },
            frames_per_video: 40,
            degrees: 3,
            seed: 0,
            motion: MotionConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.degrees == 0 {
            return Err(Error::InvalidConfig(
                "no object classes: degrees must be at least 1".into(),
            ));
        }
        if self.degrees > 3 {
            return Err(Error::InvalidConfig(format!(
                "{} degrees requested but only 3 object classes exist",
                self.degrees
            )));
        }
        if self.frames_per_video == 0 {
            return Err(Error::InvalidConfig(
                "frames_per_video must be positive".into(),
            ));
        }
        if self.canvas.height < 16 || self.canvas.width < 16 {
            return Err(Error::InvalidConfig("canvas must be at least 16×16".into()));
        }
        let m = &self.motion;
        if m.event_frames.0 < 2 || m.event_frames.0 > m.event_frames.1 {
            return Err(Error::InvalidConfig(
                "event_frames must be an ordered range starting at 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A generated video with the classes visible in each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledVideo {
    pub id: String,
    pub split: Split,
    /// Tolerance degree whose normal content the video shows (training only).
    pub degree: Option<u32>,
    pub frames: Vec<Frame>,
    pub presence: Vec<ClassSet>,
}

impl LabeledVideo {
    /// Per-frame anomaly labels (`true` = anomalous) under a tolerance degree.
    pub fn labels(&self, degree: u32) -> Result<Vec<bool>> {
        let allowed = allowed_classes(degree)?;
        Ok(self
            .presence
            .iter()
            .map(|p| !p.is_subset(allowed))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub train: Vec<LabeledVideo>,
    pub test: Vec<LabeledVideo>,
}

impl SyntheticDataset {
    /// Training videos holding normal content of `degree`.
    pub fn train_split(&self, degree: u32) -> Vec<&LabeledVideo> {
        self.train
            .iter()
            .filter(|v| v.degree == Some(degree))
            .collect()
    }

    pub fn degrees(&self) -> Vec<u32> {
        (1..=self.config.degrees).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    class: ObjectClass,
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    size: f64,
}

#[derive(Clone, Copy, Debug)]
struct Event {
    class: ObjectClass,
    start: usize,
    frames: usize,
    /// Position along the crossing axis (row for circles, column for triangles).
    lane: f64,
    size: f64,
    reverse: bool,
}

impl Event {
    fn position(&self, frame: usize, canvas: Canvas) -> Option<(f64, f64)> {
        if frame < self.start || frame >= self.start + self.frames {
            return None;
        }
        let extent = match self.class {
            ObjectClass::Circle => canvas.width as f64,
            _ => canvas.height as f64,
        };
        let half = self.size_extent();
        let (lo, hi) = (half, extent - half);
        let mut f = (frame - self.start) as f64 / (self.frames - 1) as f64;
        if self.reverse {
            f = 1.0 - f;
        }
        let along = lo + f * (hi - lo);
        Some(match self.class {
            ObjectClass::Circle => (self.lane, along),
            _ => (along, self.lane),
        })
    }

    fn size_extent(&self) -> f64 {
        match self.class {
            ObjectClass::Circle => self.size + 0.5,
            _ => self.size / 2.0 + 0.5,
        }
    }
}

fn video_rng(seed: u64, split: Split, degree: u32, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag << 56)
        .wrapping_add((degree as u64) << 40)
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn urange(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn squares(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Vec<Mover> {
    let c = cfg.canvas;
    (0..cfg.motion.squares_per_video)
        .map(|_| {
            let size = range(rng, cfg.motion.square_size);
            let speed = range(rng, cfg.motion.square_speed);
            let angle = rng.gen_range(0.0..core::f64::consts::TAU);
            Mover {
                class: ObjectClass::Square,
                y: rng.gen_range(size..c.height as f64 - size),
                x: rng.gen_range(size..c.width as f64 - size),
                vy: speed * num_traits::Float::sin(angle),
                vx: speed * num_traits::Float::cos(angle),
                size,
            }
        })
        .collect()
}

fn random_event(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    class: ObjectClass,
    start: usize,
    frames: usize,
) -> Event {
    let c = cfg.canvas;
    let size = match class {
        ObjectClass::Circle => range(rng, cfg.motion.circle_radius),
        ObjectClass::Triangle => range(rng, cfg.motion.triangle_size),
        ObjectClass::Square => range(rng, cfg.motion.square_size),
    };
    let cross = match class {
        ObjectClass::Circle => c.height as f64,
        _ => c.width as f64,
    };
    let margin = size + 1.0;
    Event {
        class,
        start,
        frames,
        lane: rng.gen_range(margin..cross - margin),
        size,
        reverse: rng.gen_bool(0.5),
    }
}

fn step_square(m: &mut Mover, canvas: Canvas) {
    let half = m.size / 2.0;
    m.x += m.vx;
    m.y += m.vy;
    let (maxx, maxy) = (canvas.width as f64 - half, canvas.height as f64 - half);
    if m.x < half {
        m.x = 2.0 * half - m.x;
        m.vx = -m.vx;
    } else if m.x > maxx {
        m.x = 2.0 * maxx - m.x;
        m.vx = -m.vx;
    }
    if m.y < half {
        m.y = 2.0 * half - m.y;
        m.vy = -m.vy;
    } else if m.y > maxy {
        m.y = 2.0 * maxy - m.y;
        m.vy = -m.vy;
    }
}

fn covers(
    class: ObjectClass,
    cy: f64,
    cx: f64,
    size: f64,
    py: f64,
    px: f64,
    pointing_down: bool,
) -> bool {
    match class {
        ObjectClass::Square => (py - cy).abs() <= size / 2.0 && (px - cx).abs() <= size / 2.0,
        ObjectClass::Circle => (py - cy) * (py - cy) + (px - cx) * (px - cx) <= size * size,
        ObjectClass::Triangle => {
            // isosceles triangle with its apex along the direction of travel
            let h = size / 2.0;
            let dy = if pointing_down { py - cy } else { cy - py };
            if !(-h..=h).contains(&dy) {
                return false;
            }
            let half_width = h * (h - dy) / (2.0 * h);
            (px - cx).abs() <= half_width
        }
    }
}

fn render(
    canvas: Canvas,
    motion: &MotionConfig,
    objects: &[(ObjectClass, f64, f64, f64, bool)],
) -> (Frame, ClassSet) {
    let mut pixels = vec![motion.background; canvas.height * canvas.width];
    let mut present = ClassSet::empty();
    for &(class, cy, cx, size, down) in objects {
        let reach = size + 1.0;
        let y0 = (cy - reach).max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(canvas.height);
        let x0 = (cx - reach).max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(canvas.width);
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(class, cy, cx, size, y as f64 + 0.5, x as f64 + 0.5, down) {
                    pixels[y * canvas.width + x] = motion.foreground;
                    present.insert(class);
                }
            }
        }
    }
    (
        Frame {
            height: canvas.height,
            width: canvas.width,
            pixels,
        },
        present,
    )
}

fn synthesize(
    cfg: &GeneratorConfig,
    squares_init: Vec<Mover>,
    events: &[Event],
) -> (Vec<Frame>, Vec<ClassSet>) {
    let mut movers = squares_init;
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut presence = Vec::with_capacity(cfg.frames_per_video);
    for f in 0..cfg.frames_per_video {
        let mut objects: Vec<(ObjectClass, f64, f64, f64, bool)> = movers
            .iter()
            .map(|m| (m.class, m.y, m.x, m.size, false))
            .collect();
        for e in events {
            if let Some((y, x)) = e.position(f, cfg.canvas) {
                objects.push((e.class, y, x, e.size, !e.reverse));
            }
        }
        let (frame, present) = render(cfg.canvas, &cfg.motion, &objects);
        frames.push(frame);
        presence.push(present);
        for m in &mut movers {
            step_square(m, cfg.canvas);
        }
    }
    (frames, presence)
}

/// Events of one class filling the whole video back to back.
fn continuous_events(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    class: ObjectClass,
) -> Vec<Event> {
    let mut events = Vec::new();
    let mut start = 0;
    while start < cfg.frames_per_video {
        let frames = urange(rng, cfg.motion.event_frames);
        events.push(random_event(rng, cfg, class, start, frames));
        start += frames;
    }
    events
}

/// One event per anomalous class, non-overlapping, in random order.
fn test_events(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, min_start: usize) -> Vec<Event> {
    let mut classes = vec![ObjectClass::Circle, ObjectClass::Triangle];
    if rng.gen_bool(0.5) {
        classes.reverse();
    }
    let n = cfg.frames_per_video;
    let usable = n.saturating_sub(min_start);
    let slot = usable / classes.len();
    let mut events = Vec::new();
    for (i, class) in classes.into_iter().enumerate() {
        let frames = urange(rng, cfg.motion.event_frames)
            .min(slot.saturating_sub(1))
            .max(2);
        let lo = min_start + i * slot;
        let hi = (lo + slot).saturating_sub(frames).max(lo);
        let start = rng.gen_range(lo..=hi);
        if start + frames <= n {
            events.push(random_event(rng, cfg, class, start, frames));
        }
    }
    events
}

/// Generates a deterministic labelled dataset.
///
/// Training videos of degree 1 contain only squares; those of degree `d > 1`
/// add a continuous stream of the class introduced at `d`. Test videos show
/// squares plus one crossing circle and one crossing triangle.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut train = Vec::new();
    for degree in 1..=cfg.degrees {
        for i in 0..cfg.n_videos.train {
            let mut rng = video_rng(seed, Split::Train, degree, i);
            let sq = squares(&mut rng, &cfg);
            let events = match ObjectClass::for_degree(degree) {
                Some(ObjectClass::Square) | None => Vec::new(),
                Some(class) => continuous_events(&mut rng, &cfg, class),
            };
            let (frames, presence) = synthesize(&cfg, sq, &events);
            train.push(LabeledVideo {
                id: format!("train-d{degree}-{i:03}"),
                split: Split::Train,
                degree: Some(degree),
                frames,
                presence,
            });
        }
    }
    let mut test = Vec::new();
    for i in 0..cfg.n_videos.test {
        let mut rng = video_rng(seed, Split::Test, 0, i);
        let sq = squares(&mut rng, &cfg);
        let events = test_events(&mut rng, &cfg, 6);
        let (frames, presence) = synthesize(&cfg, sq, &events);
        test.push(LabeledVideo {
            id: format!("test-{i:03}"),
            split: Split::Test,
            degree: None,
            frames,
            presence,
        });
    }
    Ok(SyntheticDataset {
        config: cfg,
        train,
        test,
    })
}

/// Builds a test video with squares and exactly one event of `class` covering
/// frames `[start, start + frames)`.
pub fn single_event_video(
    cfg: &GeneratorConfig,
    seed: u64,
    class: ObjectClass,
    start: usize,
    frames: usize,
) -> Result<LabeledVideo> {
    cfg.validate()?;
    if frames < 2 || start + frames > cfg.frames_per_video {
        return Err(Error::InvalidConfig(
            "event does not fit in the video".into(),
        ));
    }
    let mut rng = video_rng(seed, Split::Test, 99, 0);
    let sq = squares(&mut rng, cfg);
    let event = random_event(&mut rng, cfg, class, start, frames);
    let (frames, presence) = synthesize(cfg, sq, &[event]);
    Ok(LabeledVideo {
        id: String::from("single-event"),
        split: Split::Test,
        degree: None,
        frames,
        presence,
    })
}
