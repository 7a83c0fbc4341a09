//! Dataset ingestion: FOA WAV files, metadata CSVs, and segmentation.

mod resample;

pub use resample::resample;

use ndarray::Array2;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{
    sort_events, Event, EventList, FoaClip, SourceTag, LABEL_FPS, MAX_POLYPHONY, NUM_CHANNELS,
    SAMPLE_RATE,
};

/// Unit of the distance column in metadata CSVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    Meters,
    Centimeters,
}

impl std::str::FromStr for DistanceUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" | "meters" => Ok(Self::Meters),
            "cm" | "centimeters" => Ok(Self::Centimeters),
            other => Err(Error::Config(format!("unknown distance unit '{other}'"))),
        }
    }
}

impl DistanceUnit {
    pub fn to_meters(self, value: f64) -> f64 {
        match self {
            Self::Meters => value,
            Self::Centimeters => value / 100.0,
        }
    }
}

/// Loads a 4-channel WAV file and resamples it to 24 kHz.
///
/// Accepts 16-bit PCM and 32-bit float; other layouts are format errors.
pub fn load_foa_wav(path: &Path, source_tag: SourceTag) -> Result<FoaClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels as usize != NUM_CHANNELS {
        return Err(Error::Format(format!(
            "{}: expected {} channels, got {}",
            path.display(),
            NUM_CHANNELS,
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?}/{bits}-bit",
                path.display()
            )))
        }
    };
    let n = interleaved.len() / NUM_CHANNELS;
    let mut channels: Vec<Vec<f64>> = vec![Vec::with_capacity(n); NUM_CHANNELS];
    for (i, v) in interleaved.iter().enumerate() {
        channels[i % NUM_CHANNELS].push(*v);
    }
    let resampled: Vec<Vec<f64>> = channels
        .into_iter()
        .map(|ch| resample(&ch, spec.sample_rate, SAMPLE_RATE))
        .collect();
    let n_out = resampled[0].len();
    let mut samples = Array2::zeros((NUM_CHANNELS, n_out));
    for (ch, data) in resampled.iter().enumerate() {
        samples.row_mut(ch).assign(&ndarray::ArrayView1::from(&data[..]));
    }
    FoaClip::new(samples, SAMPLE_RATE, source_tag)
}

/// Writes a clip as a 4-channel 32-bit float WAV.
pub fn write_foa_wav(path: &Path, clip: &FoaClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: NUM_CHANNELS as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..clip.n_samples() {
        for ch in 0..NUM_CHANNELS {
            writer.write_sample(clip.samples[[ch, i]] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Parses header-less metadata lines
/// `frame,class_idx,source_idx,azimuth_deg,elevation_deg,distance_m`.
///
/// Exact duplicate rows are dropped; the result is sorted by (frame, class)
/// and checked against the polyphony cap.
pub fn parse_metadata_csv<R: BufRead>(reader: R, unit: DistanceUnit) -> Result<EventList> {
    let mut events: Vec<Event> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let parse_int = |s: &str, name: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {name} '{s}'"),
            })
        };
        let parse_float = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {name} '{s}'"),
            })
        };
        let e = Event {
            frame: parse_int(fields[0], "frame")?,
            class_idx: parse_int(fields[1], "class_idx")?,
            source_idx: parse_int(fields[2], "source_idx")?,
            azimuth_deg: parse_float(fields[3], "azimuth")?,
            elevation_deg: parse_float(fields[4], "elevation")?,
            distance_m: unit.to_meters(parse_float(fields[5], "distance")?),
        };
        e.validate().map_err(|err| Error::Parse { line: line_no, message: err.to_string() })?;
        events.push(e);
    }
    sort_events(&mut events);
    events.dedup_by(|a, b| a == b);
    let num_label_frames = events.iter().map(|e| e.frame + 1).max().unwrap_or(0);
    let list = EventList { events, num_label_frames };
    list.validate_polyphony(MAX_POLYPHONY)?;
    Ok(list)
}

/// Loads a metadata CSV from disk.
pub fn load_metadata_csv(path: &Path, unit: DistanceUnit) -> Result<EventList> {
    let file = std::fs::File::open(path)?;
    parse_metadata_csv(std::io::BufReader::new(file), unit)
}

/// Serializes events in the metadata CSV format (distances in meters).
pub fn write_metadata_csv(path: &Path, events: &EventList) -> Result<()> {
    let mut out = String::new();
    for e in &events.events {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.frame, e.class_idx, e.source_idx, e.azimuth_deg, e.elevation_deg, e.distance_m
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One fixed-length training example.
#[derive(Debug, Clone)]
pub struct Segment {
    pub clip: FoaClip,
    pub events: EventList,
    /// Index of this segment within its source clip.
    pub index: usize,
}

/// Splits a clip into consecutive non-overlapping segments of
/// `seg_seconds`, zero-padding the last one. Event frames are re-indexed
/// relative to their segment.
pub fn segment_clip(clip: &FoaClip, events: &EventList, seg_seconds: f64) -> Vec<Segment> {
    assert!(seg_seconds > 0.0, "segment length must be positive");
    let sps = (seg_seconds * clip.sample_rate as f64).round() as usize;
    let fps = (seg_seconds * LABEL_FPS as f64).round() as usize;
    let from_audio = clip.n_samples().div_ceil(sps);
    let from_events =
        events.events.iter().map(|e| (e.frame + 1).div_ceil(fps)).max().unwrap_or(0);
    let n_segments = from_audio.max(from_events);

    let mut segments = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let start = i * sps;
        let mut samples = Array2::zeros((NUM_CHANNELS, sps));
        if start < clip.n_samples() {
            let end = (start + sps).min(clip.n_samples());
            samples
                .slice_mut(ndarray::s![.., ..end - start])
                .assign(&clip.samples.slice(ndarray::s![.., start..end]));
        }
        let seg_events: Vec<Event> = events
            .events
            .iter()
            .filter(|e| e.frame >= i * fps && e.frame < (i + 1) * fps)
            .map(|e| Event { frame: e.frame - i * fps, ..*e })
            .collect();
        segments.push(Segment {
            clip: FoaClip { samples, sample_rate: clip.sample_rate, source_tag: clip.source_tag },
            events: EventList::new(seg_events, fps),
            index: i,
        });
    }
    segments
}
