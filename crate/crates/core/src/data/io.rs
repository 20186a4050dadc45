//! Binary PGM images plus a `labels.csv` table.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::{Corpus, GrayImage, Label, Sample};
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "corpus_meta";
const LABEL_HEADER: [&str; 3] = ["filename", "anomaly", "slice_index"];

/// Read an 8-bit grayscale PGM. Only square images are accepted.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = ImageReader::with_format(BufReader::new(file), ImageFormat::Pnm)
        .decode()
        .map_err(|e| Error::data(path, format!("malformed PGM: {e}")))?;
    let gray = match decoded {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::data(
                path,
                format!("expected 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = gray.dimensions();
    if w != h {
        return Err(Error::data(path, format!("image is {w}x{h}, expected a square image")));
    }
    GrayImage::new(w as usize, gray.into_raw())
}

/// Write a binary (P5) PGM.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let side = image.size as u32;
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&image.pixels, side, side, ExtendedColorType::L8)
        .map_err(|e| Error::data(path, format!("cannot encode PGM: {e}")))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(path, e.to_string())
}

pub fn write_labels(path: &Path, rows: &[(String, Label)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LABEL_HEADER).map_err(|e| csv_err(path, e))?;
    for (name, label) in rows {
        let anomaly = if label.anomaly { "1" } else { "0" };
        w.write_record([name.as_str(), anomaly, &label.slice_index.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of a labels table in file order.
pub fn read_labels(path: &Path) -> Result<Vec<(String, Label)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(Error::data(
            path,
            format!("header must be `{}`", LABEL_HEADER.join(",")),
        ));
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let name = rec[0].to_string();
        let anomaly = match &rec[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::data(
                    path,
                    format!("line {line}: anomaly `{other}` is not 0 or 1"),
                ))
            }
        };
        let slice_index: f64 = rec[2]
            .parse()
            .map_err(|_| Error::data(path, format!("line {line}: slice_index `{}` is not a number", &rec[2])))?;
        if !(0.0..=1.0).contains(&slice_index) {
            return Err(Error::data(
                path,
                format!("line {line}: slice_index {slice_index} outside [0, 1]"),
            ));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::data(path, format!("line {line}: duplicate filename {name}")));
        }
        rows.push((name, Label { anomaly, slice_index }));
    }
    Ok(rows)
}

/// Write images, `labels.csv` and a `corpus_meta` file of `key=value` lines.
pub fn save_corpus(dir: &Path, corpus: &Corpus, meta: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &corpus.samples {
        write_pgm(&dir.join(&s.filename), &s.image)?;
    }
    let rows: Vec<(String, Label)> = corpus.samples.iter().map(|s| (s.filename.clone(), s.label)).collect();
    write_labels(&dir.join(LABELS_FILE), &rows)?;
    let meta_path = dir.join(META_FILE);
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Load every `.pgm` in `dir` joined with `labels.csv`, in label order.
/// Images must be square, share one size, and have a side divisible by
/// `divisor`.
pub fn load_corpus(dir: &Path, divisor: usize) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "not a directory"));
    }
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let labelled: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut on_disk = HashSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
            if !labelled.contains_key(name.as_str()) {
                return Err(Error::data(&path, format!("no row in {LABELS_FILE}")));
            }
            on_disk.insert(name);
        }
    }
    let mut samples = Vec::with_capacity(labels.len());
    let mut size = None;
    for (name, label) in labels {
        let path = dir.join(&name);
        if !on_disk.contains(&name) {
            return Err(Error::data(&path, format!("listed in {LABELS_FILE} but not found")));
        }
        let image = read_pgm(&path)?;
        if divisor > 0 && image.size % divisor != 0 {
            return Err(Error::data(
                &path,
                format!("side {} is not divisible by {divisor}", image.size),
            ));
        }
        match size {
            None => size = Some(image.size),
            Some(s) if s != image.size => {
                return Err(Error::data(
                    &path,
                    format!("side {} differs from corpus side {s}", image.size),
                ))
            }
            _ => {}
        }
        samples.push(Sample {
            filename: name,
            image,
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::data(dir, "corpus is empty"));
    }
    Ok(Corpus { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SynthParams};

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(8, (0..64).map(|i| (i * 4) as u8).collect()).unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &img).unwrap();
        assert_eq!(&fs::read(&p).unwrap()[..2], b"P5");
        assert_eq!(read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams::default();
        let corpus = generate_corpus(1, 12, &p).unwrap();
        save_corpus(dir.path(), &corpus, &p.to_meta()).unwrap();
        assert_eq!(load_corpus(dir.path(), 4).unwrap(), corpus);
        let meta = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        assert!(meta.contains("size=16\n"));
    }

    #[test]
    fn missing_label_row_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(1, 3, &SynthParams::default()).unwrap();
        save_corpus(dir.path(), &corpus, &[]).unwrap();
        let img = &corpus.samples[0].image;
        write_pgm(&dir.path().join("extra.pgm"), img).unwrap();
        let err = load_corpus(dir.path(), 4).unwrap_err().to_string();
        assert!(err.contains("extra.pgm"), "{err}");
    }

    #[test]
    fn rejects_bad_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.pgm");
        fs::write(&path, [b"P5\n4 2\n255\n".as_slice(), &[0u8; 8]].concat()).unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("4x2"), "{err}");

        let corpus = generate_corpus(1, 2, &SynthParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus, &[]).unwrap();
        let err = load_corpus(dir.path(), 32).unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("32"), "{err}");
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n8 8\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Data { .. })));
        let labels = dir.path().join(LABELS_FILE);
        fs::write(&labels, "file,anomaly,slice\n").unwrap();
        assert!(read_labels(&labels).is_err());
        fs::write(&labels, "filename,anomaly,slice_index\na.pgm,2,0.5\n").unwrap();
        assert!(read_labels(&labels).is_err());
        fs::write(&labels, "filename,anomaly,slice_index\na.pgm,1,1.5\n").unwrap();
        assert!(read_labels(&labels).is_err());
        assert!(load_corpus(&dir.path().join("nope"), 1).is_err());
    }
}
