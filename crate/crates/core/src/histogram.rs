//! Dense event histograms: the network input representation.

use std::io;
use std::path::Path;

use crate::event_io::{EventStream, Polarity};

/// Maximum number of events accumulated into one histogram.
pub const DEFAULT_N_MAX: usize = 30_000;
/// Standard-deviation multiplier of the hot-pixel rule.
pub const DEFAULT_HOT_PIXEL_K: f64 = 10.0;
/// Number of temporal chunks in the eight-channel layout.
pub const TIME_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ChannelLayout {
    /// Positive counts, negative counts.
    TwoPolarity,
    /// Two polarity channels plus the latest normalized timestamp per pixel.
    TwoPolarityPlusTimestamp,
    /// Four equal time chunks, each with two polarity channels (chunk-major).
    FourSlicesTwoPolarity,
}

impl ChannelLayout {
    pub fn channels(self) -> usize {
        match self {
            ChannelLayout::TwoPolarity => 2,
            ChannelLayout::TwoPolarityPlusTimestamp => 3,
            ChannelLayout::FourSlicesTwoPolarity => 2 * TIME_CHUNKS,
        }
    }
}

/// `C×H×W` histogram stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EventHistogram {
    pub layout: ChannelLayout,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EventHistogram {
    pub fn zeros(layout: ChannelLayout, height: usize, width: usize) -> Self {
        EventHistogram {
            layout,
            height,
            width,
            values: vec![0.0; layout.channels() * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Sum over channels for every pixel, row-major `H×W`.
    pub fn pixel_totals(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut totals = vec![0.0; n];
        for c in 0..self.channels() {
            for (t, v) in totals.iter_mut().zip(self.channel(c)) {
                *t += v;
            }
        }
        totals
    }
}

fn polarity_channel(p: Polarity) -> usize {
    match p {
        Polarity::On => 0,
        Polarity::Off => 1,
    }
}

fn used_events(stream: &EventStream, n_max: usize) -> &[crate::event_io::Event] {
    &stream.events[..stream.events.len().min(n_max)]
}

/// Accumulates up to `n_max` events into positive / negative count channels.
pub fn build_histogram(stream: &EventStream, n_max: usize) -> EventHistogram {
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut hist = EventHistogram::zeros(ChannelLayout::TwoPolarity, h, w);
    for e in used_events(stream, n_max) {
        let i = hist.index(polarity_channel(e.polarity), e.y as usize, e.x as usize);
        hist.values[i] += 1.0;
    }
    hist
}

/// Time span of the first `n_max` events, inclusive.
pub fn slice_span(stream: &EventStream, n_max: usize) -> Option<(u64, u64)> {
    let used = used_events(stream, n_max);
    Some((used.first()?.t, used.last()?.t))
}

fn span_fraction(t: u64, span: (u64, u64)) -> f64 {
    let (start, end) = span;
    if end <= start {
        return 1.0;
    }
    (t.saturating_sub(start) as f64 / (end - start) as f64).min(1.0)
}

/// Three-channel histogram whose last channel holds the latest timestamp per
/// pixel relative to the slice's own span.
pub fn add_timestamp_channel(stream: &EventStream, n_max: usize) -> EventHistogram {
    let span = slice_span(stream, n_max).unwrap_or((0, 0));
    add_timestamp_channel_in(stream, n_max, span)
}

/// As [`add_timestamp_channel`], normalizing timestamps by an explicit
/// `(start, end)` span.
pub fn add_timestamp_channel_in(stream: &EventStream, n_max: usize, span: (u64, u64)) -> EventHistogram {
    let base = build_histogram(stream, n_max);
    let (h, w) = (base.height, base.width);
    let mut hist = EventHistogram::zeros(ChannelLayout::TwoPolarityPlusTimestamp, h, w);
    hist.values[..2 * h * w].copy_from_slice(&base.values);
    for e in used_events(stream, n_max) {
        // events are time-sorted, so the last write per pixel is the latest
        hist.set(2, e.y as usize, e.x as usize, span_fraction(e.t, span));
    }
    hist
}

/// Eight-channel histogram over four equal time chunks of the slice's span.
pub fn build_time_slices(stream: &EventStream, n_max: usize) -> EventHistogram {
    let span = slice_span(stream, n_max).unwrap_or((0, 0));
    build_time_slices_in(stream, n_max, span)
}

pub fn time_chunk(t: u64, span: (u64, u64)) -> usize {
    let (start, end) = span;
    if end <= start {
        return 0;
    }
    let f = t.saturating_sub(start) as f64 / (end - start) as f64;
    ((f * TIME_CHUNKS as f64).floor() as usize).min(TIME_CHUNKS - 1)
}

pub fn build_time_slices_in(stream: &EventStream, n_max: usize, span: (u64, u64)) -> EventHistogram {
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut hist = EventHistogram::zeros(ChannelLayout::FourSlicesTwoPolarity, h, w);
    for e in used_events(stream, n_max) {
        let c = 2 * time_chunk(e.t, span) + polarity_channel(e.polarity);
        let i = hist.index(c, e.y as usize, e.x as usize);
        hist.values[i] += 1.0;
    }
    hist
}

/// Builds the histogram for any layout.
pub fn build_layout(stream: &EventStream, n_max: usize, layout: ChannelLayout) -> EventHistogram {
    match layout {
        ChannelLayout::TwoPolarity => build_histogram(stream, n_max),
        ChannelLayout::TwoPolarityPlusTimestamp => add_timestamp_channel(stream, n_max),
        ChannelLayout::FourSlicesTwoPolarity => build_time_slices(stream, n_max),
    }
}

/// Zeroes every pixel whose channel-summed count exceeds
/// `mean + k * stddev` of all per-pixel totals.
pub fn remove_hot_pixels(hist: &EventHistogram, k: f64) -> EventHistogram {
    let totals = hist.pixel_totals();
    let n = totals.len() as f64;
    if totals.is_empty() {
        return hist.clone();
    }
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let threshold = mean + k * var.sqrt();
    let mut out = hist.clone();
    let plane = hist.height * hist.width;
    for (p, &t) in totals.iter().enumerate() {
        if t > threshold {
            for c in 0..hist.channels() {
                out.values[c * plane + p] = 0.0;
            }
        }
    }
    out
}

/// Divides by the global maximum; an all-zero histogram stays zero.
pub fn normalize(hist: &EventHistogram) -> EventHistogram {
    let max = hist.max();
    let mut out = hist.clone();
    if max > 0.0 {
        for v in &mut out.values {
            *v /= max;
        }
    }
    out
}

/// Per-channel bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(hist: &EventHistogram, target_h: usize, target_w: usize) -> EventHistogram {
    assert!(target_h > 0 && target_w > 0, "resize target must be positive");
    if target_h == hist.height && target_w == hist.width {
        return hist.clone();
    }
    let mut out = EventHistogram::zeros(hist.layout, target_h, target_w);
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..target_w).map(|x| axis(x, hist.width, target_w)).collect();
    for c in 0..hist.channels() {
        for y in 0..target_h {
            let (y0, y1, fy) = axis(y, hist.height, target_h);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = hist.get(c, y0, x0) * (1.0 - fx) + hist.get(c, y0, x1) * fx;
                let bot = hist.get(c, y1, x0) * (1.0 - fx) + hist.get(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Standard preprocessing chain: accumulate, resize, drop hot pixels, normalize.
pub fn preprocess(
    stream: &EventStream,
    n_max: usize,
    layout: ChannelLayout,
    size: Option<(usize, usize)>,
) -> EventHistogram {
    let mut hist = build_layout(stream, n_max, layout);
    if let Some((h, w)) = size {
        hist = resize_bilinear(&hist, h, w);
    }
    normalize(&remove_hot_pixels(&hist, DEFAULT_HOT_PIXEL_K))
}

/// Encodes a histogram as binary PPM: positive polarity red, negative blue,
/// timestamp channel (if any) green. Values are clamped to `[0, 1]`.
pub fn to_ppm(hist: &EventHistogram) -> Vec<u8> {
    let (h, w) = (hist.height, hist.width);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = match hist.layout {
                ChannelLayout::TwoPolarity => (hist.get(0, y, x), 0.0, hist.get(1, y, x)),
                ChannelLayout::TwoPolarityPlusTimestamp => {
                    (hist.get(0, y, x), hist.get(2, y, x), hist.get(1, y, x))
                }
                ChannelLayout::FourSlicesTwoPolarity => {
                    let pos: f64 = (0..TIME_CHUNKS).map(|k| hist.get(2 * k, y, x)).sum();
                    let neg: f64 = (0..TIME_CHUNKS).map(|k| hist.get(2 * k + 1, y, x)).sum();
                    (pos, 0.0, neg)
                }
            };
            out.extend_from_slice(&[byte(r), byte(g), byte(b)]);
        }
    }
    out
}

pub fn render(hist: &EventHistogram, path: &Path) -> io::Result<()> {
    std::fs::write(path, to_ppm(hist))
}
