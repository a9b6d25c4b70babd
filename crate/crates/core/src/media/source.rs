use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::synth::{synth_frame, SynthSpec};
use super::{Fps, Frame, VideoMeta};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const INDEX_FILE: &str = "index.json";

/// Contents of a frames directory's `index.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<Fps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iframes: Option<Vec<usize>>,
}

impl IndexFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let index: IndexFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{INDEX_FILE}: {e}")))?;
        if let Some(fps) = index.fps {
            fps.validate()?;
        }
        Ok(index)
    }
}

/// Directory of `NNNNNN.png` frames with an optional `index.json`.
#[derive(Debug, Clone)]
pub struct FramesDir {
    pub root: PathBuf,
    frame_count: usize,
    index: IndexFile,
}

impl FramesDir {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let unreadable = |reason: String| Error::UnreadableSource { path: root.clone(), reason };
        let entries = std::fs::read_dir(&root).map_err(|e| unreadable(e.to_string()))?;

        let mut indices = Vec::new();
        for entry in entries {
            let name = entry.map_err(|e| unreadable(e.to_string()))?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(stem) = name.strip_suffix(".png") {
                if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                    indices.push(stem.parse::<usize>().expect("six ascii digits"));
                }
            }
        }
        indices.sort_unstable();
        if let Some((pos, &idx)) = indices.iter().enumerate().find(|&(pos, &idx)| pos != idx) {
            return Err(unreadable(format!("frame files not contiguous: expected {pos:06}.png, found {idx:06}.png")));
        }

        let index_path = root.join(INDEX_FILE);
        let index = match std::fs::read(&index_path) {
            Ok(bytes) => IndexFile::parse(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => IndexFile::default(),
            Err(e) => return Err(unreadable(e.to_string())),
        };
        Ok(Self { root, frame_count: indices.len(), index })
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.root.join(format!("{index:06}.png"))
    }
}

/// Container file handled by `ffprobe`/`ffmpeg` subprocesses.
#[derive(Debug, Clone)]
pub struct ExternalVideo {
    pub path: PathBuf,
    pub ffprobe: PathBuf,
    pub ffmpeg: PathBuf,
}

impl ExternalVideo {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), ffprobe: "ffprobe".into(), ffmpeg: "ffmpeg".into() }
    }

    fn run(&self, program: &Path, args: &[&str]) -> Result<Vec<u8>> {
        let out = Command::new(program).args(args).output().map_err(|e| Error::UnreadableSource {
            path: self.path.clone(),
            reason: format!("cannot run {}: {e}", program.display()),
        })?;
        if !out.status.success() {
            return Err(Error::UnreadableSource {
                path: self.path.clone(),
                reason: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(out.stdout)
    }

    fn probe(&self) -> Result<(VideoMeta, u32, u32)> {
        #[derive(Deserialize)]
        struct Probe {
            #[serde(default)]
            streams: Vec<StreamInfo>,
            #[serde(default)]
            frames: Vec<FrameInfo>,
        }
        #[derive(Deserialize)]
        struct StreamInfo {
            width: u32,
            height: u32,
            r_frame_rate: String,
        }
        #[derive(Deserialize)]
        struct FrameInfo {
            #[serde(default)]
            pict_type: String,
        }

        let path = self.path.to_string_lossy().into_owned();
        let raw = self.run(
            &self.ffprobe,
            &[
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-show_entries",
                "stream=width,height,r_frame_rate:frame=pict_type",
                "-of",
                "json",
                &path,
            ],
        )?;
        let probe: Probe = serde_json::from_slice(&raw).map_err(|e| Error::DecodeFailure(format!("ffprobe output: {e}")))?;
        let stream = probe.streams.first().ok_or_else(|| Error::UnreadableSource {
            path: self.path.clone(),
            reason: "no video stream".into(),
        })?;
        let fps = parse_rate(&stream.r_frame_rate).unwrap_or_default();
        let iframes = probe.frames.iter().enumerate().filter(|(_, f)| f.pict_type == "I").map(|(i, _)| i).collect();
        let meta = VideoMeta::new(probe.frames.len(), fps, iframes, path)?;
        Ok((meta, stream.width, stream.height))
    }

    fn decode(&self, indices: &[usize]) -> Result<Vec<Frame>> {
        let (meta, width, height) = self.probe()?;
        check_range(indices, meta.frame_count)?;
        let mut wanted: Vec<usize> = indices.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let select = wanted.iter().map(|i| format!("eq(n\\,{i})")).collect::<Vec<_>>().join("+");
        let filter = format!("select='{select}'");
        let path = self.path.to_string_lossy().into_owned();
        let raw = self.run(
            &self.ffmpeg,
            &["-v", "error", "-i", &path, "-vf", &filter, "-vsync", "0", "-f", "rawvideo", "-pix_fmt", "rgb24", "-"],
        )?;
        let frame_bytes = (width * height * 3) as usize;
        if raw.len() != frame_bytes * wanted.len() {
            return Err(Error::DecodeFailure(format!(
                "expected {} bytes from ffmpeg, got {}",
                frame_bytes * wanted.len(),
                raw.len()
            )));
        }
        indices
            .iter()
            .map(|i| {
                let slot = wanted.binary_search(i).expect("index was requested");
                let chunk = raw[slot * frame_bytes..(slot + 1) * frame_bytes].to_vec();
                Frame::from_raw(width, height, chunk).ok_or_else(|| Error::DecodeFailure("short frame".into()))
            })
            .collect()
    }
}

fn parse_rate(s: &str) -> Option<Fps> {
    let (n, d) = s.split_once('/')?;
    Fps(n.parse().ok()?, d.parse().ok()?).validate().ok()
}

/// A handle to something frames can be decoded from.
#[derive(Debug, Clone)]
pub enum VideoSource {
    FramesDir(FramesDir),
    Synthetic(SynthSpec),
    External(ExternalVideo),
}

impl VideoSource {
    /// Directories use the frames-directory backend; regular files go to the
    /// external decoder.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let md = std::fs::metadata(path)
            .map_err(|e| Error::UnreadableSource { path: path.to_path_buf(), reason: e.to_string() })?;
        if md.is_dir() {
            Ok(VideoSource::FramesDir(FramesDir::open(path)?))
        } else {
            Ok(VideoSource::External(ExternalVideo::new(path)))
        }
    }
}

pub fn probe(source: &VideoSource) -> Result<VideoMeta> {
    match source {
        VideoSource::FramesDir(dir) => {
            let id = dir.root.display().to_string();
            if dir.frame_count == 0 {
                return Err(Error::EmptyVideo(id));
            }
            let fps = dir.index.fps.unwrap_or_default();
            match &dir.index.iframes {
                Some(iframes) => VideoMeta::new(dir.frame_count, fps, iframes.clone(), id),
                None => VideoMeta::all_iframes(dir.frame_count, fps, id),
            }
        }
        VideoSource::Synthetic(spec) => {
            spec.validate()?;
            let id = format!("synth:{}:{}", serde_json::to_value(spec.pattern)?.as_str().unwrap_or("?"), spec.seed);
            if spec.iframe_interval == 1 {
                VideoMeta::all_iframes(spec.frame_count, spec.fps, id)
            } else {
                VideoMeta::new(spec.frame_count, spec.fps, spec.iframes(), id)
            }
        }
        VideoSource::External(ext) => ext.probe().map(|(meta, _, _)| meta),
    }
}

fn check_range(indices: &[usize], frame_count: usize) -> Result<()> {
    match indices.iter().find(|&&i| i >= frame_count) {
        Some(&index) => Err(Error::IndexOutOfRange { index, frame_count }),
        None => Ok(()),
    }
}

/// Decode one PNG frame to RGB.
pub fn decode_png_frame(bytes: &[u8]) -> Result<Frame> {
    image::load(Cursor::new(bytes), image::ImageFormat::Png).map(|img| img.to_rgb8()).map_err(|e| Error::DecodeFailure(e.to_string()))
}

/// Decode `indices` in the requested order.
pub fn decode_frames(source: &VideoSource, indices: &[usize]) -> Result<Vec<Frame>> {
    match source {
        VideoSource::FramesDir(dir) => {
            check_range(indices, dir.frame_count)?;
            indices
                .iter()
                .map(|&i| {
                    let path = dir.frame_path(i);
                    let bytes = std::fs::read(&path).map_err(|e| Error::DecodeFailure(format!("{}: {e}", path.display())))?;
                    decode_png_frame(&bytes).map_err(|e| match e {
                        Error::DecodeFailure(m) => Error::DecodeFailure(format!("{}: {m}", path.display())),
                        e => e,
                    })
                })
                .collect()
        }
        VideoSource::Synthetic(spec) => {
            check_range(indices, spec.frame_count)?;
            Ok(indices.iter().map(|&t| synth_frame(spec, t)).collect())
        }
        VideoSource::External(ext) => ext.decode(indices),
    }
}

/// Write every frame of `source` as a frames directory.
pub fn write_frames_dir(source: &VideoSource, out: &Path) -> Result<VideoMeta> {
    let meta = probe(source)?;
    std::fs::create_dir_all(out)?;
    for t in 0..meta.frame_count {
        let frame = decode_frames(source, &[t])?.pop().expect("one frame");
        atomic_write(&out.join(format!("{t:06}.png")), &crate::io::encode_png(&frame)?)?;
    }
    let index = IndexFile { fps: Some(meta.fps), iframes: Some(meta.iframe_indices.clone()) };
    atomic_write(&out.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Pattern;

    #[test]
    fn frames_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::new(Pattern::MovingDot, 6, 20, 16);
        spec.velocity = [2.0, 1.0];
        spec.iframe_interval = 2;
        let synth = VideoSource::Synthetic(spec);
        let meta = write_frames_dir(&synth, dir.path()).unwrap();
        assert_eq!(meta.iframe_indices, vec![0, 2, 4]);

        let src = VideoSource::open(dir.path()).unwrap();
        let back = probe(&src).unwrap();
        assert_eq!(back.frame_count, 6);
        assert_eq!(back.iframe_indices, vec![0, 2, 4]);
        let a = decode_frames(&src, &[0, 2]).unwrap();
        let b = decode_frames(&synth, &[0, 2]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(decode_frames(&src, &[6]), Err(Error::IndexOutOfRange { index: 6, .. })));
    }

    #[test]
    fn declared_iframes_echoed() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(4, 4);
        for t in 0..64 {
            frame.save(dir.path().join(format!("{t:06}.png"))).unwrap();
        }
        std::fs::write(dir.path().join(INDEX_FILE), br#"{"fps": [30000, 1001], "iframes": [0, 16, 32, 48]}"#).unwrap();
        let meta = probe(&VideoSource::open(dir.path()).unwrap()).unwrap();
        assert_eq!(meta.frame_count, 64);
        assert_eq!(meta.iframe_indices, vec![0, 16, 32, 48]);
        assert_eq!(meta.fps, Fps(30000, 1001));
    }

    #[test]
    fn synthetic_without_index_is_all_iframes() {
        let spec = SynthSpec::new(Pattern::Static, 10, 8, 8);
        let meta = probe(&VideoSource::Synthetic(spec)).unwrap();
        assert_eq!(meta.iframe_indices, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_missing_sources() {
        let dir = tempfile::tempdir().unwrap();
        let src = VideoSource::open(dir.path()).unwrap();
        assert!(matches!(probe(&src), Err(Error::EmptyVideo(_))));
        assert!(matches!(
            VideoSource::open(dir.path().join("nope")),
            Err(Error::UnreadableSource { .. })
        ));
    }

    #[test]
    fn gap_in_frame_files_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(2, 2);
        frame.save(dir.path().join("000000.png")).unwrap();
        frame.save(dir.path().join("000002.png")).unwrap();
        assert!(matches!(FramesDir::open(dir.path()), Err(Error::UnreadableSource { .. })));
    }

    #[test]
    fn bad_index_json() {
        assert!(IndexFile::parse(b"{\"fps\": [0, 1]}").is_err());
        assert!(IndexFile::parse(b"not json").is_err());
        assert_eq!(IndexFile::parse(b"{}").unwrap(), IndexFile::default());
    }

    #[test]
    fn external_backend_reports_missing_tool() {
        let mut ext = ExternalVideo::new("/nonexistent/clip.mp4");
        ext.ffprobe = "/nonexistent/ffprobe".into();
        assert!(matches!(ext.probe(), Err(Error::UnreadableSource { .. })));
    }
}
