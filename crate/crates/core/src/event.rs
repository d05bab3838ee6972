//! Event streams and their voxel-grid encoding.
//!
//! Each event deposits its signed polarity into the two temporal bins nearest
//! to its normalized timestamp, split linearly. Timestamps stay integer
//! microseconds everywhere except inside that interpolation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of temporal bins.
pub const DEFAULT_BINS: usize = 5;

/// Default segment length, microseconds (~30 Hz).
pub const DEFAULT_SEGMENT_US: i64 = 33_333;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    EventOutOfBounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("event at t={t} us lies outside segment [{start}, {end})")]
    EventOutOfSegment { t: i64, start: i64, end: i64 },
    #[error("event stream is not sorted by timestamp (index {index})")]
    UnsortedStream { index: usize },
    #[error("invalid voxel dimensions or segment length")]
    InvalidDimensions,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t_us")]
    pub t: i64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1
    pub p: i8,
}

/// Voxel grid dimensions: temporal bins, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoxelDims {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
}

impl VoxelDims {
    pub fn new(bins: usize, height: usize, width: usize) -> Self {
        VoxelDims { bins, height, width }
    }

    fn len(&self) -> usize {
        self.bins * self.height * self.width
    }
}

/// `D x H x W` tensor for one time segment, stored bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EventVoxel {
    pub dims: VoxelDims,
    pub data: Vec<f64>,
    pub t_start: i64,
    pub t_end: i64,
    pub segment_index: usize,
}

impl EventVoxel {
    pub fn zeros(dims: VoxelDims, t_start: i64, t_end: i64, segment_index: usize) -> Self {
        EventVoxel {
            dims,
            data: vec![0.0; dims.len()],
            t_start,
            t_end,
            segment_index,
        }
    }

    pub fn get(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(bin, y, x)]
    }

    fn index(&self, bin: usize, y: usize, x: usize) -> usize {
        (bin * self.dims.height + y) * self.dims.width + x
    }

    /// Signed sum over all cells.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per-pixel sum of `|value|` over the temporal bins, row-major `H x W`.
    pub fn abs_density(&self) -> Vec<f64> {
        let plane = self.dims.height * self.dims.width;
        let mut out = vec![0.0; plane];
        for bin in 0..self.dims.bins {
            let slice = &self.data[bin * plane..(bin + 1) * plane];
            for (o, v) in out.iter_mut().zip(slice) {
                *o += v.abs();
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Accumulate `events` falling in `[t_start, t_start + dt)` into a voxel grid.
///
/// A segment without events yields an all-zero tensor.
pub fn voxelize(events: &[Event], t_start: i64, dt: i64, dims: VoxelDims) -> Result<EventVoxel, EncodingError> {
    voxelize_segment(events, t_start, dt, dims, 0)
}

fn voxelize_segment(
    events: &[Event],
    t_start: i64,
    dt: i64,
    dims: VoxelDims,
    segment_index: usize,
) -> Result<EventVoxel, EncodingError> {
    if dims.bins == 0 || dims.height == 0 || dims.width == 0 || dt <= 0 {
        return Err(EncodingError::InvalidDimensions);
    }
    let t_end = t_start + dt;
    let mut voxel = EventVoxel::zeros(dims, t_start, t_end, segment_index);
    let mut sorted = events.to_vec();
    sorted.sort_unstable();
    let span = (dims.bins - 1) as f64;
    for e in &sorted {
        if e.x as usize >= dims.width || e.y as usize >= dims.height {
            return Err(EncodingError::EventOutOfBounds {
                x: e.x,
                y: e.y,
                width: dims.width,
                height: dims.height,
            });
        }
        if e.t < t_start || e.t >= t_end {
            return Err(EncodingError::EventOutOfSegment {
                t: e.t,
                start: t_start,
                end: t_end,
            });
        }
        let p = f64::from(e.p);
        let tn = (e.t - t_start) as f64 / dt as f64 * span;
        let lo = (tn.floor() as usize).min(dims.bins - 1);
        let frac = tn - lo as f64;
        let (x, y) = (e.x as usize, e.y as usize);
        let i_lo = voxel.index(lo, y, x);
        voxel.data[i_lo] += p * (1.0 - frac);
        if frac > 0.0 && lo + 1 < dims.bins {
            let i_hi = voxel.index(lo + 1, y, x);
            voxel.data[i_hi] += p * frac;
        }
    }
    Ok(voxel)
}

/// Split a sorted stream into contiguous half-open segments of length `dt`,
/// starting at the first event.
pub fn segment_stream(events: &[Event], dt: i64, dims: VoxelDims) -> Result<Vec<EventVoxel>, EncodingError> {
    match events.first() {
        None => Ok(Vec::new()),
        Some(first) => segment_stream_from(events, first.t, dt, dims),
    }
}

/// As [`segment_stream`] with an explicit start time. Segment `k` covers
/// `[t_start + k dt, t_start + (k+1) dt)`; events before `t_start` are skipped.
pub fn segment_stream_from(
    events: &[Event],
    t_start: i64,
    dt: i64,
    dims: VoxelDims,
) -> Result<Vec<EventVoxel>, EncodingError> {
    if dt <= 0 {
        return Err(EncodingError::InvalidDimensions);
    }
    if let Some(index) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(EncodingError::UnsortedStream { index: index + 1 });
    }
    let events: Vec<Event> = events.iter().copied().filter(|e| e.t >= t_start).collect();
    let Some(last) = events.last() else {
        return Ok(Vec::new());
    };
    let count = ((last.t - t_start) / dt + 1) as usize;
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0;
    for k in 0..count {
        let start = t_start + k as i64 * dt;
        let end = start + dt;
        let begin = cursor;
        while cursor < events.len() && events[cursor].t < end {
            cursor += 1;
        }
        out.push(voxelize_segment(&events[begin..cursor], start, dt, dims, k)?);
    }
    Ok(out)
}

pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<Event>, EncodingError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(EncodingError::from)).collect()
}

pub fn write_events_csv<W: Write>(writer: W, events: &[Event]) -> Result<(), EncodingError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(["t_us", "x", "y", "p"])?;
    for e in events {
        wtr.serialize(e)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_events(path: &Path) -> Result<Vec<Event>, EncodingError> {
    read_events_csv(std::fs::File::open(path)?)
}
