//! On-disk formats shared with downstream tooling.
//!
//! * Sparse frames: CSV `t,i,j,k`, rows sorted by `(t, i, j, k)`.
//! * Dense dataset (`CWDS`) and predictions (`CWPR`): little-endian binary.
//!   Header is the 4-byte magic, `version: u32`, then `u32` fields
//!   `t1, t2, n1, n2, n3, num_samples`. The payload holds samples in order.
//!   A `CWDS` sample is its `t1` history frames followed by its `t2` future
//!   frames; a `CWPR` sample is its `t2` predicted frames. Each frame is
//!   bit-packed in `k`-fastest order (cubelet `(i, j, k)` is bit
//!   `(i*n2 + j)*n3 + k`), least significant bit first within each byte, and
//!   padded with zero bits to a byte boundary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::discretize::Sample;
use crate::error::{Error, Result};
use crate::world::{CubeletIndex, GridShape, OccupancyFrame};

pub const DATASET_MAGIC: [u8; 4] = *b"CWDS";
pub const PREDICTIONS_MAGIC: [u8; 4] = *b"CWPR";
pub const FORMAT_VERSION: u32 = 1;
pub const FRAMES_HEADER: &str = "t,i,j,k";

/// Writes `path` through a temporary sibling file and a rename, so readers
/// never observe a partial artifact.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write(&mut w)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        w.get_ref().sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes frames as sorted `t,i,j,k` rows.
pub fn write_frames_csv<W: Write>(mut w: W, frames: &[OccupancyFrame]) -> Result<()> {
    let io = |e| Error::io("<frames>", e);
    writeln!(w, "{FRAMES_HEADER}").map_err(io)?;
    let mut sorted: Vec<&OccupancyFrame> = frames.iter().collect();
    sorted.sort_by_key(|f| f.t());
    for f in sorted {
        for c in f.occupied() {
            writeln!(w, "{},{},{},{}", f.t(), c.i, c.j, c.k).map_err(io)?;
        }
    }
    Ok(())
}

/// Reads a sparse frames file holding timesteps `0..num_frames` of `shape`.
/// Timesteps with no rows are empty frames.
pub fn read_frames_csv<R: Read>(r: R, shape: GridShape, num_frames: usize) -> Result<Vec<OccupancyFrame>> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io("<frames>", e))?
        .unwrap_or_default();
    if header.trim() != FRAMES_HEADER {
        return Err(Error::format(format!("frames header must be `{FRAMES_HEADER}`")));
    }
    let mut cells: Vec<Vec<CubeletIndex>> = vec![Vec::new(); num_frames];
    let mut prev: Option<(usize, CubeletIndex)> = None;
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<frames>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(format!("frames row {n}: expected `t,i,j,k`, got `{line}`"));
        let v: Vec<u64> = line
            .split(',')
            .map(|f| f.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let [t, i, j, k] = v[..] else { return Err(bad()) };
        let t = t as usize;
        let idx = CubeletIndex::new(i as u32, j as u32, k as u32);
        if t >= num_frames {
            return Err(Error::format(format!("frames row {n}: timestep {t} >= {num_frames}")));
        }
        if prev.is_some_and(|p| p >= (t, idx)) {
            return Err(Error::format(format!("frames row {n}: rows must be strictly sorted")));
        }
        prev = Some((t, idx));
        cells[t].push(idx);
    }
    cells
        .into_iter()
        .enumerate()
        .map(|(t, c)| OccupancyFrame::new(t, shape, c))
        .collect()
}

/// Fixed header of `CWDS` and `CWPR` files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub t1: u32,
    pub t2: u32,
    pub shape: GridShape,
    pub num_samples: u32,
}

impl DenseHeader {
    pub const LEN: usize = 32;

    pub fn frame_bytes(&self) -> usize {
        (self.shape.cubelet_count() as usize).div_ceil(8)
    }

    /// Frames stored per sample.
    pub fn frames_per_sample(&self) -> usize {
        match self.magic {
            DATASET_MAGIC => (self.t1 + self.t2) as usize,
            _ => self.t2 as usize,
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.num_samples as u64 * self.frames_per_sample() as u64 * self.frame_bytes() as u64
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.magic)?;
        for v in [
            self.version,
            self.t1,
            self.t2,
            self.shape.n1,
            self.shape.n2,
            self.shape.n3,
            self.num_samples,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R, expect: [u8; 4]) -> Result<Self> {
        let mut buf = [0u8; Self::LEN];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("truncated header"))?;
        let magic: [u8; 4] = buf[0..4].try_into().unwrap();
        if magic != expect {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expect)
            )));
        }
        let field = |n: usize| u32::from_le_bytes(buf[4 + 4 * n..8 + 4 * n].try_into().unwrap());
        let version = field(0);
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let shape = GridShape::new(field(3), field(4), field(5))
            .map_err(|e| Error::format(e.to_string()))?;
        Ok(DenseHeader {
            magic,
            version,
            t1: field(1),
            t2: field(2),
            shape,
            num_samples: field(6),
        })
    }
}

/// Packs one frame, LSB-first, `k`-fastest.
pub fn pack_frame(frame: &OccupancyFrame) -> Vec<u8> {
    let shape = frame.shape();
    let mut bytes = vec![0u8; (shape.cubelet_count() as usize).div_ceil(8)];
    for &c in frame.occupied() {
        let bit = shape.linear(c);
        bytes[bit / 8] |= 1 << (bit % 8);
    }
    bytes
}

pub fn unpack_frame(t: usize, shape: GridShape, bytes: &[u8]) -> Result<OccupancyFrame> {
    let bits = shape.cubelet_count() as usize;
    let mut occupied = Vec::new();
    for (b, &byte) in bytes.iter().enumerate() {
        let mut rest = byte;
        while rest != 0 {
            let bit = b * 8 + rest.trailing_zeros() as usize;
            if bit >= bits {
                return Err(Error::format("non-zero padding bits in frame"));
            }
            occupied.push(shape.unlinear(bit));
            rest &= rest - 1;
        }
    }
    OccupancyFrame::new(t, shape, occupied)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} = {v} does not fit in u32")))
}

/// Writes a `CWDS` dataset of the given windows.
pub fn write_dataset<W: Write>(w: &mut W, shape: GridShape, t1: usize, t2: usize, samples: &[Sample<'_>]) -> Result<()> {
    let header = DenseHeader {
        magic: DATASET_MAGIC,
        version: FORMAT_VERSION,
        t1: to_u32(t1, "t1")?,
        t2: to_u32(t2, "t2")?,
        shape,
        num_samples: to_u32(samples.len(), "num_samples")?,
    };
    let io = |e| Error::io("<dataset>", e);
    header.write(w).map_err(io)?;
    for s in samples {
        if s.t1() != t1 || s.t2() != t2 {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has t1={}, t2={}",
                s.start_t,
                s.t1(),
                s.t2()
            )));
        }
        for f in s.history.iter().chain(s.future) {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch(format!("frame {} shape {}", f.t(), f.shape())));
            }
            w.write_all(&pack_frame(f)).map_err(io)?;
        }
    }
    Ok(())
}

/// Writes a `CWPR` predictions file: `t2` frames per sample.
pub fn write_predictions<W: Write>(
    w: &mut W,
    shape: GridShape,
    t1: usize,
    t2: usize,
    predictions: &[Vec<OccupancyFrame>],
) -> Result<()> {
    let header = DenseHeader {
        magic: PREDICTIONS_MAGIC,
        version: FORMAT_VERSION,
        t1: to_u32(t1, "t1")?,
        t2: to_u32(t2, "t2")?,
        shape,
        num_samples: to_u32(predictions.len(), "num_samples")?,
    };
    let io = |e| Error::io("<predictions>", e);
    header.write(w).map_err(io)?;
    for (s, frames) in predictions.iter().enumerate() {
        if frames.len() != t2 {
            return Err(Error::ShapeMismatch(format!(
                "prediction {s} has {} frames, expected {t2}",
                frames.len()
            )));
        }
        for f in frames {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch(format!("prediction {s} frame shape {}", f.shape())));
            }
            w.write_all(&pack_frame(f)).map_err(io)?;
        }
    }
    Ok(())
}

/// A decoded `CWDS` or `CWPR` file. `samples[s]` lists that sample's frames
/// in file order, each labelled with its position inside the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFile {
    pub header: DenseHeader,
    pub samples: Vec<Vec<OccupancyFrame>>,
}

impl DenseFile {
    /// History frames of a `CWDS` sample.
    pub fn history(&self, s: usize) -> &[OccupancyFrame] {
        &self.samples[s][..self.header.t1 as usize]
    }

    /// Future frames of a `CWDS` sample, or the frames of a `CWPR` sample.
    pub fn future(&self, s: usize) -> &[OccupancyFrame] {
        let frames = &self.samples[s];
        &frames[frames.len() - self.header.t2 as usize..]
    }
}

fn read_dense<R: Read>(mut r: R, magic: [u8; 4]) -> Result<DenseFile> {
    let header = DenseHeader::read(&mut r, magic)?;
    let frame_bytes = header.frame_bytes();
    let per_sample = header.frames_per_sample();
    let mut buf = vec![0u8; frame_bytes];
    let mut samples = Vec::with_capacity(header.num_samples as usize);
    for s in 0..header.num_samples as usize {
        let mut frames = Vec::with_capacity(per_sample);
        for t in 0..per_sample {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(format!("truncated payload in sample {s}")))?;
            frames.push(unpack_frame(t, header.shape, &buf)?);
        }
        samples.push(frames);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail).map_err(|e| Error::io("<dense>", e))? != 0 {
        return Err(Error::format("trailing bytes after payload"));
    }
    Ok(DenseFile { header, samples })
}

pub fn read_dataset<R: Read>(r: R) -> Result<DenseFile> {
    read_dense(r, DATASET_MAGIC)
}

pub fn read_predictions<R: Read>(r: R) -> Result<DenseFile> {
    read_dense(r, PREDICTIONS_MAGIC)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::make_windows;
    use proptest::prelude::*;

    fn shape(a: u32, b: u32, c: u32) -> GridShape {
        GridShape::new(a, b, c).unwrap()
    }

    fn frame(t: usize, s: GridShape, cells: &[(u32, u32, u32)]) -> OccupancyFrame {
        OccupancyFrame::new(t, s, cells.iter().map(|&c| c.into()).collect()).unwrap()
    }

    #[test]
    fn pack_layout_is_lsb_first_k_fastest() {
        let s = shape(1, 2, 5);
        let f = frame(0, s, &[(0, 0, 0), (0, 0, 3), (0, 1, 4)]);
        // bits 0, 3 and 9.
        assert_eq!(pack_frame(&f), vec![0b0000_1001, 0b0000_0010]);
        assert_eq!(unpack_frame(0, s, &pack_frame(&f)).unwrap(), f);
        assert!(unpack_frame(0, s, &[0, 0b0000_0100]).is_err());
    }

    #[test]
    fn dataset_header_and_size() {
        let s = shape(3, 3, 3);
        let frames: Vec<_> = (0..25).map(|t| frame(t, s, &[((t % 3) as u32, 1, 2)])).collect();
        let windows = make_windows(&frames, 10, 10).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, s, 10, 10, &windows).unwrap();
        assert_eq!(&buf[..4], b"CWDS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 6);
        // 27 bits -> 4 bytes per frame, 20 frames per sample.
        assert_eq!(buf.len(), 32 + 6 * 20 * 4);

        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.samples.len(), 6);
        for (w, s) in windows.iter().zip(0..) {
            let hist: Vec<_> = w.history.iter().map(|f| f.occupied().to_vec()).collect();
            let got: Vec<_> = back.history(s).iter().map(|f| f.occupied().to_vec()).collect();
            assert_eq!(hist, got);
            assert_eq!(back.future(s)[9].occupied(), w.future[9].occupied());
        }
        let mut again = Vec::new();
        let owned: Vec<_> = (0..6)
            .map(|s| Sample {
                start_t: s,
                history: back.history(s),
                future: back.future(s),
            })
            .collect();
        write_dataset(&mut again, s, 10, 10, &owned).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn empty_dataset_reads_back_empty() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, shape(9, 9, 9), 10, 10, &[]).unwrap();
        let d = read_dataset(buf.as_slice()).unwrap();
        assert!(d.samples.is_empty());
        assert_eq!(d.header.shape, shape(9, 9, 9));
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, shape(2, 2, 2), 1, 1, &[]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset(bad.as_slice()).is_err());
        assert!(read_predictions(buf.as_slice()).is_err());
        assert!(read_dataset(&buf[..10]).is_err());
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(read_dataset(v2.as_slice()).is_err());
        // Claims one sample but carries no payload.
        let mut short = buf.clone();
        short[28] = 1;
        assert!(read_dataset(short.as_slice()).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_dataset(long.as_slice()).is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let s = shape(2, 3, 4);
        let preds = vec![
            vec![frame(0, s, &[(1, 2, 3)]), frame(1, s, &[])],
            vec![frame(0, s, &[(0, 0, 0), (1, 1, 1)]), frame(1, s, &[(0, 2, 0)])],
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, s, 10, 2, &preds).unwrap();
        assert_eq!(&buf[..4], b"CWPR");
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back.samples, preds);
        assert_eq!(back.future(1), preds[1].as_slice());
        assert!(write_predictions(&mut Vec::new(), s, 10, 3, &preds).is_err());
    }

    #[test]
    fn frames_csv_round_trip_and_validation() {
        let s = shape(4, 4, 4);
        let frames = vec![frame(0, s, &[(1, 1, 1), (0, 3, 2)]), frame(1, s, &[]), frame(2, s, &[(3, 3, 3)])];
        let mut buf = Vec::new();
        write_frames_csv(&mut buf, &frames).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "t,i,j,k\n0,0,3,2\n0,1,1,1\n2,3,3,3\n");
        assert_eq!(read_frames_csv(buf.as_slice(), s, 3).unwrap(), frames);
        assert!(read_frames_csv("t,i,j,k\n0,1,1,1\n0,0,0,0\n".as_bytes(), s, 1).is_err());
        assert!(read_frames_csv("t,i,j,k\n5,1,1,1\n".as_bytes(), s, 1).is_err());
        assert!(read_frames_csv("t,i,j,k\n0,4,1,1\n".as_bytes(), s, 1).is_err());
        assert!(read_frames_csv("t,x\n".as_bytes(), s, 1).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, |w| {
            w.write_all(b"one").map_err(|e| Error::io("x", e))
        })
        .unwrap();
        write_atomic(&path, |w| {
            w.write_all(b"two").map_err(|e| Error::io("x", e))
        })
        .unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let failed = write_atomic(&path, |_| Err(Error::config("boom")));
        assert!(failed.is_err());
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(n1 in 1u32..5, n2 in 1u32..5, n3 in 1u32..7, seed in any::<u64>()) {
            let s = shape(n1, n2, n3);
            let cells: Vec<CubeletIndex> = s.iter().filter(|c| {
                let h = (s.linear(*c) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed;
                h.count_ones() % 2 == 0
            }).collect();
            let f = OccupancyFrame::new(0, s, cells).unwrap();
            let packed = pack_frame(&f);
            prop_assert_eq!(packed.len(), (s.cubelet_count() as usize).div_ceil(8));
            prop_assert_eq!(unpack_frame(0, s, &packed).unwrap(), f);
        }
    }
}
