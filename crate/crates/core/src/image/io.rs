use super::{GrayImage, ImageError, ImageRGB, SegmentClass, SegmentMap};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<File, ImageError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::MissingFile(path.to_path_buf()),
        _ => ImageError::Io { path: path.to_path_buf(), source: e },
    })
}

fn decode_failure(path: &Path, detail: impl ToString) -> ImageError {
    ImageError::DecodeFailure { path: path.to_path_buf(), detail: detail.to_string() }
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<DecodedPng, ImageError> {
    let file = open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_failure(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_failure(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| decode_failure(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

/// Reads an 8-bit RGB or RGBA PNG into `[0, 1]` floats (`v / 255`).
/// Alpha is discarded.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRGB, ImageError> {
    let path = path.as_ref();
    let png = decode_png(path)?;
    if png.depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth { path: path.to_path_buf(), detail: format!("{:?}", png.depth) });
    }
    let stride = match png.color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_failure(path, format!("colour type {other:?}, expected RGB or RGBA"))),
    };
    let data = png.bytes.chunks_exact(stride).flat_map(|p| [p[0], p[1], p[2]]).map(|b| b as f32 / 255.0).collect();
    ImageRGB::new(png.height, png.width, data)
}

/// Anything that can be written as an 8-bit PNG or a PFM.
pub trait Pfm {
    fn dims(&self) -> (usize, usize);
    fn channels(&self) -> usize;
    fn samples(&self) -> &[f32];
}

impl Pfm for ImageRGB {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn channels(&self) -> usize {
        3
    }
    fn samples(&self) -> &[f32] {
        &self.data
    }
}

impl Pfm for GrayImage {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn channels(&self) -> usize {
        1
    }
    fn samples(&self) -> &[f32] {
        &self.data
    }
}

/// Clamps to `[0, 1]` and rounds half up to the nearest byte.
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<(), ImageError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| ImageError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes an RGB or gray 8-bit PNG. Values are clamped to `[0, 1]` first.
pub fn save_png(img: &impl Pfm, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let bytes: Vec<u8> = img.samples().iter().map(|&v| quantize(v)).collect();
    let color = if img.channels() == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale };
    write_png(path, w, h, color, png::BitDepth::Eight, &bytes)
}

/// Writes a little-endian PFM (`PF` for colour, `Pf` for gray).
pub fn save_pfm(img: &impl Pfm, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let c = img.channels();
    let magic = if c == 3 { "PF" } else { "Pf" };
    let mut out = Vec::with_capacity(32 + h * w * c * 4);
    out.extend_from_slice(format!("{magic}\n{w} {h}\n-1.0\n").as_bytes());
    let samples = img.samples();
    // scanlines are stored bottom-up
    for y in (0..h).rev() {
        for v in &samples[y * w * c..(y + 1) * w * c] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    file.write_all(&out).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

/// Decoded PFM contents.
#[derive(Clone, Debug, PartialEq)]
pub enum PfmImage {
    Rgb(ImageRGB),
    Gray(GrayImage),
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()
}

/// Reads a PFM file. A negative scale means little-endian samples.
pub fn load_pfm(path: impl AsRef<Path>) -> Result<PfmImage, ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let header = |detail: &str| ImageError::HeaderMismatch { path: path.to_path_buf(), detail: detail.into() };

    let mut pos = 0;
    let channels = match header_token(&bytes, &mut pos) {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(header("magic must be PF or Pf")),
    };
    let mut dim = || -> Result<usize, ImageError> {
        header_token(&bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| header("bad dimensions"))
    };
    let width = dim()?;
    let height = dim()?;
    let scale: f64 = header_token(&bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| header("bad scale"))?;
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let little = scale < 0.0;

    let expected = width * height * channels * 4;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload { path: path.to_path_buf(), expected, found: payload.len() });
    }
    let row = width * channels;
    let mut data = vec![0.0f32; width * height * channels];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(match channels {
        3 => PfmImage::Rgb(ImageRGB::new(height, width, data)?),
        _ => PfmImage::Gray(GrayImage::new(height, width, data)?),
    })
}

impl PfmImage {
    pub fn into_rgb(self) -> Option<ImageRGB> {
        match self {
            PfmImage::Rgb(img) => Some(img),
            PfmImage::Gray(_) => None,
        }
    }

    pub fn into_gray(self) -> Option<GrayImage> {
        match self {
            PfmImage::Gray(img) => Some(img),
            PfmImage::Rgb(_) => None,
        }
    }
}

/// Sidecar JSON path for a segment PNG: `foo.png` -> `foo.json`.
pub fn sidecar_path(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

/// Reads a 16-bit (or 8-bit) grayscale label PNG and its class sidecar.
///
/// Labels are relabelled to `0..K` in first-seen order. The sidecar maps
/// original labels to class names; labels it does not mention, or a missing
/// sidecar, default to `other`.
pub fn load_segments(path: impl AsRef<Path>) -> Result<SegmentMap, ImageError> {
    let path = path.as_ref();
    let png = decode_png(path)?;
    if png.color != png::ColorType::Grayscale {
        return Err(decode_failure(path, format!("colour type {:?}, expected grayscale labels", png.color)));
    }
    let raw: Vec<u32> = match png.depth {
        png::BitDepth::Sixteen => png.bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as u32).collect(),
        png::BitDepth::Eight => png.bytes.iter().map(|&b| b as u32).collect(),
        other => {
            return Err(ImageError::UnsupportedBitDepth { path: path.to_path_buf(), detail: format!("{other:?}") })
        }
    };

    let sidecar = sidecar_path(path);
    let table = read_sidecar(&sidecar)?;
    SegmentMap::from_raw(png.height, png.width, &raw, |l| table.get(&l).copied())
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<u32, SegmentClass>, ImageError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(ImageError::Io { path: path.to_path_buf(), source: e }),
    };
    let malformed = |detail: String| ImageError::MalformedSidecar { path: path.to_path_buf(), detail };
    let entries: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    entries
        .into_iter()
        .map(|(k, v)| {
            let label = k.parse::<u32>().map_err(|_| malformed(format!("key {k:?} is not a label")))?;
            let class = SegmentClass::parse(&v).ok_or_else(|| malformed(format!("unknown class {v:?}")))?;
            Ok((label, class))
        })
        .collect()
}

/// Writes labels as a 16-bit grayscale PNG plus the class sidecar.
pub fn save_segments(seg: &SegmentMap, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    if seg.classes.len() > u16::MAX as usize + 1 {
        return Err(ImageError::LabelOverflow(seg.classes.len() - 1));
    }
    let bytes: Vec<u8> = seg.labels.iter().flat_map(|&l| (l as u16).to_be_bytes()).collect();
    write_png(path, seg.width, seg.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)?;
    let table: BTreeMap<String, &str> =
        seg.classes.iter().enumerate().map(|(l, c)| (l.to_string(), c.name())).collect();
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&table).expect("string map serializes");
    std::fs::write(&sidecar, json).map_err(io_err(&sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn write_rgb_png(path: &Path, w: u32, h: u32, bytes: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(bytes).unwrap();
    }

    #[test]
    fn png_byte_mapping() {
        let dir = tmp();
        let p = dir.path().join("a.png");
        write_rgb_png(&p, 2, 2, &[0; 12]);
        assert!(load_png(&p).unwrap().data().iter().all(|&v| v == 0.0));

        write_rgb_png(&p, 1, 1, &[255, 128, 0]);
        let img = load_png(&p).unwrap();
        assert_eq!(img.get(0, 0)[0], 1.0);
        assert!((img.get(0, 0)[1] - 0.501_960_8).abs() < 1e-6);
    }

    #[test]
    fn png_quantization_rules() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn png_missing_and_bad_depth() {
        let dir = tmp();
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(ImageError::MissingFile(_))));
        let seg = SegmentMap::new(1, 2, vec![0, 1], vec![SegmentClass::Other; 2]).unwrap();
        let p = dir.path().join("seg.png");
        save_segments(&seg, &p).unwrap();
        assert!(matches!(load_png(&p), Err(ImageError::UnsupportedBitDepth { .. })));
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_png(&p), Err(ImageError::DecodeFailure { .. })));
    }

    #[test]
    fn pfm_gray_header_and_little_endian() {
        let dir = tmp();
        let p = dir.path().join("one.pfm");
        let mut bytes = b"Pf\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&0.375f32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let g = load_pfm(&p).unwrap().into_gray().unwrap();
        assert_eq!(g.data(), &[0.375]);

        let mut big = b"PF\n1 1\n1.0\n".to_vec();
        for v in [0.25f32, 0.5, 0.75] {
            big.extend_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&p, &big).unwrap();
        let c = load_pfm(&p).unwrap().into_rgb().unwrap();
        assert_eq!(c.data(), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn pfm_errors() {
        let dir = tmp();
        let p = dir.path().join("bad.pfm");
        std::fs::write(&p, b"P6\n1 1\n255\n").unwrap();
        assert!(matches!(load_pfm(&p), Err(ImageError::HeaderMismatch { .. })));
        std::fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(load_pfm(&p), Err(ImageError::TruncatedPayload { expected: 16, found: 4, .. })));
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let dir = tmp();
        let p = dir.path().join("rows.pfm");
        let g = GrayImage::new(2, 1, vec![1.0, 2.0]).unwrap();
        save_pfm(&g, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(&payload[..4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn segments_sidecar_rules() {
        let dir = tmp();
        let p = dir.path().join("s.png");
        let bytes: Vec<u8> = [3u16, 7, 7, 3].iter().flat_map(|l| l.to_be_bytes()).collect();
        write_png(&p, 2, 2, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes).unwrap();

        let seg = load_segments(&p).unwrap();
        assert_eq!(seg.labels(), &[0, 1, 1, 0]);
        assert_eq!(seg.classes(), &[SegmentClass::Other; 2]);

        std::fs::write(sidecar_path(&p), "{}").unwrap();
        assert_eq!(load_segments(&p).unwrap().classes(), &[SegmentClass::Other; 2]);

        std::fs::write(sidecar_path(&p), r#"{"3":"wall","7":"other"}"#).unwrap();
        assert_eq!(load_segments(&p).unwrap().classes()[0], SegmentClass::Wall);

        std::fs::write(sidecar_path(&p), r#"{"3":"floor"}"#).unwrap();
        assert!(matches!(load_segments(&p), Err(ImageError::MalformedSidecar { .. })));
        std::fs::write(sidecar_path(&p), "[1,2]").unwrap();
        assert!(matches!(load_segments(&p), Err(ImageError::MalformedSidecar { .. })));
    }

    #[test]
    fn segments_round_trip_and_overflow() {
        let dir = tmp();
        let p = dir.path().join("seg.png");
        let seg = SegmentMap::new(
            2,
            2,
            vec![0, 1, 2, 0],
            vec![SegmentClass::Wall, SegmentClass::Ceiling, SegmentClass::Other],
        )
        .unwrap();
        save_segments(&seg, &p).unwrap();
        assert_eq!(load_segments(&p).unwrap(), seg);

        let n = 70_000;
        let big = SegmentMap::new(1, n, (0..n as u32).collect(), vec![SegmentClass::Other; n]).unwrap();
        assert!(matches!(save_segments(&big, &p), Err(ImageError::LabelOverflow(_))));
    }

    fn raster() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..12, 1usize..12)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(-0.5f32..1.5, h * w * 3)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn png_round_trip_error_bound((h, w, data) in raster()) {
            let dir = tmp();
            let p = dir.path().join("r.png");
            let img = ImageRGB::new(h, w, data).unwrap();
            save_png(&img, &p).unwrap();
            let back = load_png(&p).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a.clamp(0.0, 1.0) - b).abs() <= 1.0 / 510.0 + 1e-7);
            }
        }

        #[test]
        fn pfm_round_trip_is_bit_exact((h, w, data) in raster(), gray in any::<bool>()) {
            let dir = tmp();
            let p = dir.path().join("r.pfm");
            if gray {
                let g = GrayImage::new(h, w, data[..h * w].to_vec()).unwrap();
                save_pfm(&g, &p).unwrap();
                prop_assert_eq!(load_pfm(&p).unwrap(), PfmImage::Gray(g));
            } else {
                let img = ImageRGB::new(h, w, data).unwrap();
                save_pfm(&img, &p).unwrap();
                prop_assert_eq!(load_pfm(&p).unwrap(), PfmImage::Rgb(img));
            }
        }
    }
}
