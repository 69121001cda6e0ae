//! On-disk embedding files.
//!
//! Binary layout (all integers and floats little-endian, floats IEEE-754 f64):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "OTTEREMB"
//! 8       4     version (u32, currently 1)
//! 12      4     flags (u32): bit 0 image labels, bit 1 caption labels,
//!               bit 2 class prototypes, bit 3 attribute annotations
//! 16      8     N (u64)
//! 24      8     d_img_in (u64)
//! 32      8     d_txt_in (u64)
//! 40            image block   N × d_img_in f64, row-major
//!               text block    N × d_txt_in f64, row-major
//!               [bit 0] image labels    N × i64
//!               [bit 1] caption labels  N × i64
//!               [bit 2] C (u64), text prototypes C × d_txt_in f64,
//!                       image prototypes C × d_img_in f64
//!               [bit 3] A (u64), attribute text prototypes A × d_txt_in f64,
//!                       then per sample: count (u32) and count × attribute id (u32)
//! ```
//!
//! Trailing bytes are an error. `NonFiniteValue` indices count f64 values in
//! file order starting at 0 for the first image entry.
//!
//! Text variant (`.csv` / `.tsv`): one header line naming the columns
//! `img_0 … img_{d-1}, txt_0 … txt_{e-1}` and an optional trailing `label`
//! column (image concept), then one sample per line.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{OtterError, Result};
use crate::numerics::Matrix;
use crate::trainer::PairBatch;

use super::{AttributeAnnotations, SynthDataset};

pub const MAGIC: &[u8; 8] = b"OTTEREMB";
pub const VERSION: u32 = 1;

const FLAG_IMAGE_LABELS: u32 = 1;
const FLAG_CAPTION_LABELS: u32 = 1 << 1;
const FLAG_PROTOTYPES: u32 = 1 << 2;
const FLAG_ATTRIBUTES: u32 = 1 << 3;

fn is_text_path(path: &Path) -> Option<u8> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Some(b','),
        Some("tsv") => Some(b'\t'),
        _ => None,
    }
}

/// Writes `data` to `path`; `.csv`/`.tsv` paths use the text variant, which
/// keeps only features and image labels.
pub fn save_embeddings(path: &Path, data: &SynthDataset) -> Result<()> {
    if let Some(delim) = is_text_path(path) {
        return save_text(path, data, delim);
    }
    let bytes = encode(data)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode(data: &SynthDataset) -> Result<Vec<u8>> {
    let n = data.len();
    let (d_img, d_txt) = (data.d_img_in(), data.d_txt_in());
    let mut flags = 0;
    if data.concept_of_image.is_some() {
        flags |= FLAG_IMAGE_LABELS;
    }
    if data.concept_of_caption.is_some() {
        flags |= FLAG_CAPTION_LABELS;
    }
    if data.class_prototypes_text.is_some() && data.class_prototypes_image.is_some() {
        flags |= FLAG_PROTOTYPES;
    }
    if data.attributes.is_some() {
        flags |= FLAG_ATTRIBUTES;
    }

    let mut out = Vec::with_capacity(40 + 8 * n * (d_img + d_txt + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [n, d_img, d_txt] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let put_f64s = |out: &mut Vec<u8>, m: &Matrix| {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put_f64s(&mut out, &data.pairs.image_features);
    put_f64s(&mut out, &data.pairs.text_features);
    for labels in [&data.concept_of_image, &data.concept_of_caption]
        .into_iter()
        .flatten()
    {
        for &l in labels {
            out.extend_from_slice(&(l as i64).to_le_bytes());
        }
    }
    if flags & FLAG_PROTOTYPES != 0 {
        let pt = data.class_prototypes_text.as_ref().expect("flagged");
        let pi = data.class_prototypes_image.as_ref().expect("flagged");
        if pt.cols() != d_txt || pi.cols() != d_img || pt.rows() != pi.rows() {
            return Err(OtterError::ShapeMismatch("class prototype shapes".into()));
        }
        out.extend_from_slice(&(pt.rows() as u64).to_le_bytes());
        put_f64s(&mut out, pt);
        put_f64s(&mut out, pi);
    }
    if let Some(attrs) = &data.attributes {
        if attrs.sets.len() != n || attrs.text_prototypes.cols() != d_txt {
            return Err(OtterError::ShapeMismatch("attribute annotations".into()));
        }
        out.extend_from_slice(&(attrs.n_attributes() as u64).to_le_bytes());
        put_f64s(&mut out, &attrs.text_prototypes);
        for set in &attrs.sets {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for &a in set {
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    floats_read: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, block: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(OtterError::FormatError {
                location: format!("byte {}", self.pos),
                message: format!(
                    "truncated: missing {block} ({len} bytes needed, {} left)",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, block: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, block)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, block: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, block)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| OtterError::FormatError {
            location: format!("byte {}", self.pos - 8),
            message: format!("{block} value {v} too large"),
        })
    }

    fn i64s(&mut self, count: usize, block: &str) -> Result<Vec<i64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| overflow(block))?, block)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, block: &str) -> Result<Matrix> {
        let count = rows.checked_mul(cols).ok_or_else(|| overflow(block))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| overflow(block))?, block)?;
        let mut data = Vec::with_capacity(count);
        for c in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(OtterError::NonFiniteValue(self.floats_read));
            }
            self.floats_read += 1;
            data.push(v);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

fn overflow(block: &str) -> OtterError {
    OtterError::FormatError {
        location: "header".into(),
        message: format!("{block} size overflows"),
    }
}

fn labels_to_concepts(labels: Vec<i64>, block: &str) -> Result<Vec<usize>> {
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            usize::try_from(l).map_err(|_| OtterError::FormatError {
                location: format!("{block}[{i}]"),
                message: format!("negative label {l}"),
            })
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<SynthDataset> {
    let mut r = Reader {
        bytes,
        pos: 0,
        floats_read: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(OtterError::FormatError {
            location: "byte 0".into(),
            message: "bad magic, expected OTTEREMB".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(OtterError::FormatError {
            location: "byte 8".into(),
            message: format!("unsupported version {version}"),
        });
    }
    let flags = r.u32("flags")?;
    if flags & !(FLAG_IMAGE_LABELS | FLAG_CAPTION_LABELS | FLAG_PROTOTYPES | FLAG_ATTRIBUTES) != 0 {
        return Err(OtterError::FormatError {
            location: "byte 12".into(),
            message: format!("unknown flags {flags:#x}"),
        });
    }
    let n = r.u64("sample count")?;
    let d_img = r.u64("image dimension")?;
    let d_txt = r.u64("text dimension")?;

    let image = r.matrix(n, d_img, "image block")?;
    let text = r.matrix(n, d_txt, "text block")?;
    let mut pairs = PairBatch::new(image, text)?;

    let concept_of_image = if flags & FLAG_IMAGE_LABELS != 0 {
        let raw = r.i64s(n, "image label block")?;
        pairs = pairs.with_labels(raw.clone())?;
        Some(labels_to_concepts(raw, "image labels")?)
    } else {
        None
    };
    let concept_of_caption = if flags & FLAG_CAPTION_LABELS != 0 {
        Some(labels_to_concepts(
            r.i64s(n, "caption label block")?,
            "caption labels",
        )?)
    } else {
        None
    };
    let (class_prototypes_text, class_prototypes_image) = if flags & FLAG_PROTOTYPES != 0 {
        let c = r.u64("prototype count")?;
        let t = r.matrix(c, d_txt, "text prototype block")?;
        let i = r.matrix(c, d_img, "image prototype block")?;
        (Some(t), Some(i))
    } else {
        (None, None)
    };
    let attributes = if flags & FLAG_ATTRIBUTES != 0 {
        let a = r.u64("attribute count")?;
        let text_prototypes = r.matrix(a, d_txt, "attribute prototype block")?;
        let mut sets = Vec::with_capacity(n);
        for i in 0..n {
            let count = r.u32("attribute set")? as usize;
            let mut set = BTreeSet::new();
            for _ in 0..count {
                let id = r.u32("attribute set")?;
                if id as usize >= a {
                    return Err(OtterError::FormatError {
                        location: format!("attribute set {i}"),
                        message: format!("attribute id {id} out of range ({a} attributes)"),
                    });
                }
                set.insert(id);
            }
            sets.push(set);
        }
        Some(AttributeAnnotations {
            sets,
            text_prototypes,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(OtterError::FormatError {
            location: format!("byte {}", r.pos),
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(SynthDataset {
        pairs,
        concept_of_image,
        concept_of_caption,
        class_prototypes_text,
        class_prototypes_image,
        attributes,
    })
}

/// Reads a binary or text embedding file (chosen by extension, `.csv`/`.tsv`
/// for text).
pub fn load_embeddings(path: &Path) -> Result<SynthDataset> {
    if let Some(delim) = is_text_path(path) {
        return load_text(path, delim);
    }
    decode(&fs::read(path)?)
}

fn save_text(path: &Path, data: &SynthDataset, delim: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delim)
        .from_path(path)
        .map_err(|e| OtterError::Io(e.to_string()))?;
    let mut header: Vec<String> = (0..data.d_img_in()).map(|i| format!("img_{i}")).collect();
    header.extend((0..data.d_txt_in()).map(|i| format!("txt_{i}")));
    if data.concept_of_image.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)
        .map_err(|e| OtterError::Io(e.to_string()))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data
            .pairs
            .image_features
            .row(i)
            .iter()
            .chain(data.pairs.text_features.row(i))
            .map(|v| format!("{v:?}"))
            .collect();
        if let Some(l) = &data.concept_of_image {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)
            .map_err(|e| OtterError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn load_text(path: &Path, delim: u8) -> Result<SynthDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| OtterError::Io(e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| OtterError::FormatError {
            location: "line 1".into(),
            message: e.to_string(),
        })?
        .clone();
    let mut d_img = 0;
    let mut d_txt = 0;
    let mut has_label = false;
    for (k, name) in header.iter().enumerate() {
        let expect_img = format!("img_{d_img}");
        let expect_txt = format!("txt_{d_txt}");
        if name == expect_img && d_txt == 0 {
            d_img += 1;
        } else if name == expect_txt && d_img > 0 {
            d_txt += 1;
        } else if name == "label" && k == header.len() - 1 && d_txt > 0 {
            has_label = true;
        } else {
            return Err(OtterError::FormatError {
                location: format!("line 1, column {}", k + 1),
                message: format!("unexpected header `{name}`"),
            });
        }
    }
    if d_img == 0 || d_txt == 0 {
        return Err(OtterError::FormatError {
            location: "line 1".into(),
            message: "header needs img_* and txt_* columns".into(),
        });
    }

    let mut img = Vec::new();
    let mut txt = Vec::new();
    let mut labels = Vec::new();
    let mut flat = 0usize;
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| OtterError::FormatError {
            location: format!("line {line}"),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(OtterError::FormatError {
                location: format!("line {line}"),
                message: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        for (k, field) in rec.iter().enumerate().take(d_img + d_txt) {
            let v: f64 = field.trim().parse().map_err(|_| OtterError::FormatError {
                location: format!("line {line}, column {}", k + 1),
                message: format!("not a number: `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(OtterError::NonFiniteValue(flat));
            }
            flat += 1;
            if k < d_img {
                img.push(v);
            } else {
                txt.push(v);
            }
        }
        if has_label {
            let field = &rec[d_img + d_txt];
            let l: usize = field.trim().parse().map_err(|_| OtterError::FormatError {
                location: format!("line {line}, column {}", d_img + d_txt + 1),
                message: format!("bad label `{field}`"),
            })?;
            labels.push(l);
        }
    }
    let n = img.len() / d_img;
    let mut pairs = PairBatch::new(
        Matrix::from_vec(n, d_img, img)?,
        Matrix::from_vec(n, d_txt, txt)?,
    )?;
    let concept_of_image = if has_label {
        pairs = pairs.with_labels(labels.iter().map(|&l| l as i64).collect())?;
        Some(labels)
    } else {
        None
    };
    Ok(SynthDataset {
        pairs,
        concept_of_image,
        concept_of_caption: None,
        class_prototypes_text: None,
        class_prototypes_image: None,
        attributes: None,
    })
}
