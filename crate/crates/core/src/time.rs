//! Integer-microsecond time arithmetic.
//!
//! Metric code compares interval overlaps and tolerance windows with strict
//! and non-strict inequalities ("more than half", "within 20 ms"). Doing that
//! on f64 seconds makes exact-boundary cases depend on rounding, so times are
//! snapped to whole microseconds first.

pub type Micros = i64;

pub fn secs_to_us(s: f64) -> Micros {
    (s * 1e6).round() as Micros
}

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1e3).round() as Micros
}

pub fn us_to_secs(us: Micros) -> f64 {
    us as f64 / 1e6
}

/// Start of frame `index` (frame times carry no half-frame offset).
pub fn frame_to_us(index: usize, frame_shift_ms: f64) -> Micros {
    ms_to_us(index as f64 * frame_shift_ms)
}

pub fn frame_to_secs(index: f64, frame_shift_ms: f64) -> f64 {
    index * frame_shift_ms / 1000.0
}

/// Half-open time interval `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: Micros,
    pub end: Micros,
}

impl Span {
    pub fn new(start: Micros, end: Micros) -> Self {
        Span { start, end }
    }

    pub fn from_secs(onset_s: f64, offset_s: f64) -> Self {
        Span::new(secs_to_us(onset_s), secs_to_us(offset_s))
    }

    pub fn from_frames(start: usize, end: usize, frame_shift_ms: f64) -> Self {
        Span::new(
            frame_to_us(start, frame_shift_ms),
            frame_to_us(end, frame_shift_ms),
        )
    }

    pub fn len(&self) -> Micros {
        (self.end - self.start).max(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlap(&self, other: &Span) -> Micros {
        (self.end.min(other.end) - self.start.max(other.start)).max(0)
    }

    /// Twice the center, which stays an integer.
    pub fn center2(&self) -> Micros {
        self.start + self.end
    }
}

/// Total length of the union of `spans` (any order, overlaps allowed).
pub fn union_len(spans: &mut [Span]) -> Micros {
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<Span> = None;
    for s in spans.iter().filter(|s| !s.is_empty()) {
        match cur {
            Some(ref mut c) if s.start <= c.end => c.end = c.end.max(s.end),
            Some(c) => {
                total += c.len();
                cur = Some(*s);
            }
            None => cur = Some(*s),
        }
    }
    total + cur.map_or(0, |c| c.len())
}

/// Length of `union(a) ∩ union(b)`.
pub fn intersection_len(a: &[Span], b: &[Span]) -> Micros {
    let a = merged(a);
    let b = merged(b);
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        total += a[i].overlap(&b[j]);
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn merged(spans: &[Span]) -> Vec<Span> {
    let mut v: Vec<Span> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    v.sort_unstable();
    let mut out: Vec<Span> = Vec::with_capacity(v.len());
    for s in v {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}
