//! Binary embedding file ("DHEM").
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"DHEM"
//! version  u16 = 1
//! streams  u8  = 3
//! id_len   u32, then id_len bytes of UTF-8
//! per stream (in tag order T, R, I):
//!   tag  u8 (0 = text, 1 = reasoning, 2 = image)
//!   rows u32
//!   cols u32
//!   rows * cols f32, row-major
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::DataError;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"DHEM";
pub const EMBEDDING_VERSION: u16 = 1;
pub const DEFAULT_TOKENS: usize = 197;
pub const DEFAULT_MODEL_DIM: usize = 768;

/// A modality stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Text,
    Reasoning,
    Image,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Text, Stream::Reasoning, Stream::Image];

    pub fn tag(self) -> u8 {
        match self {
            Stream::Text => 0,
            Stream::Reasoning => 1,
            Stream::Image => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stream::Text),
            1 => Some(Stream::Reasoning),
            2 => Some(Stream::Image),
            _ => None,
        }
    }

    /// Single-letter code used on the command line (`t`, `i`, `r`).
    pub fn letter(self) -> char {
        match self {
            Stream::Text => 'T',
            Stream::Reasoning => 'R',
            Stream::Image => 'I',
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Text => "text",
            Stream::Reasoning => "reasoning",
            Stream::Image => "image",
        })
    }
}

/// Three L×d feature matrices, one per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTriple {
    pub text: Array2<f32>,
    pub reasoning: Array2<f32>,
    pub image: Array2<f32>,
}

impl EmbeddingTriple {
    pub fn zeros(tokens: usize, dim: usize) -> Self {
        EmbeddingTriple {
            text: Array2::zeros((tokens, dim)),
            reasoning: Array2::zeros((tokens, dim)),
            image: Array2::zeros((tokens, dim)),
        }
    }

    pub fn stream(&self, s: Stream) -> &Array2<f32> {
        match s {
            Stream::Text => &self.text,
            Stream::Reasoning => &self.reasoning,
            Stream::Image => &self.image,
        }
    }

    fn stream_mut(&mut self, s: Stream) -> &mut Array2<f32> {
        match s {
            Stream::Text => &mut self.text,
            Stream::Reasoning => &mut self.reasoning,
            Stream::Image => &mut self.image,
        }
    }

    pub fn tokens(&self) -> usize {
        self.text.nrows()
    }

    pub fn dim(&self) -> usize {
        self.text.ncols()
    }

    /// All streams share one shape and hold only finite values.
    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.text.dim();
        for s in Stream::ALL {
            let m = self.stream(s);
            if m.dim() != shape {
                return Err(DataError::ShapeMismatch(format!(
                    "{s} stream is {:?}, text stream is {:?}",
                    m.dim(),
                    shape
                )));
            }
            if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(DataError::NonFiniteValue { stream: s, row, col });
            }
        }
        Ok(())
    }
}

/// Conventional location of a meme's embedding file.
pub fn embedding_path(dir: impl AsRef<Path>, id: &str) -> PathBuf {
    dir.as_ref().join(format!("{id}.dhem"))
}

pub fn write_embedding_to<W: Write>(
    mut out: W,
    id: &str,
    triple: &EmbeddingTriple,
) -> Result<(), DataError> {
    triple.validate()?;
    let id_len = u32::try_from(id.len())
        .map_err(|_| DataError::ShapeMismatch("id longer than u32::MAX bytes".into()))?;
    out.write_all(&EMBEDDING_MAGIC)?;
    out.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    out.write_all(&[Stream::ALL.len() as u8])?;
    out.write_all(&id_len.to_le_bytes())?;
    out.write_all(id.as_bytes())?;
    for s in Stream::ALL {
        let m = triple.stream(s);
        let (rows, cols) = m.dim();
        let dims = |n: usize| {
            u32::try_from(n).map_err(|_| DataError::ShapeMismatch(format!("{s} dim {n} too large")))
        };
        out.write_all(&[s.tag()])?;
        out.write_all(&dims(rows)?.to_le_bytes())?;
        out.write_all(&dims(cols)?.to_le_bytes())?;
        let mut payload = Vec::with_capacity(rows * cols * 4);
        for v in m.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn write_embedding_file(
    id: &str,
    triple: &EmbeddingTriple,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_embedding_to(&mut buf, id, triple)?;
    fs::write(path, buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], DataError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::Corrupt("unexpected end of file".into()),
        _ => DataError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_embedding_from<R: Read>(mut r: R) -> Result<(String, EmbeddingTriple), DataError> {
    if read_exact::<_, 4>(&mut r)? != EMBEDDING_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != EMBEDDING_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let [count] = read_exact::<_, 1>(&mut r)?;
    if usize::from(count) != Stream::ALL.len() {
        return Err(DataError::ShapeMismatch(format!("expected 3 streams, header says {count}")));
    }
    let id_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)
        .map_err(|_| DataError::Corrupt("truncated id".into()))?;
    let id = String::from_utf8(id).map_err(|_| DataError::Corrupt("id is not UTF-8".into()))?;

    let mut slots: [Option<Array2<f32>>; 3] = [None, None, None];
    for _ in 0..count {
        let [tag] = read_exact::<_, 1>(&mut r)?;
        let stream =
            Stream::from_tag(tag).ok_or_else(|| DataError::Corrupt(format!("unknown stream tag {tag}")))?;
        let rows = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes).map_err(|_| {
            DataError::ShapeMismatch(format!("{stream} header says {rows}x{cols} but payload is short"))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slot = &mut slots[usize::from(tag)];
        if slot.is_some() {
            return Err(DataError::Corrupt(format!("duplicate {stream} stream")));
        }
        *slot = Some(
            Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| DataError::ShapeMismatch(e.to_string()))?,
        );
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DataError::ShapeMismatch("trailing bytes after last stream".into()));
    }

    let mut triple = EmbeddingTriple::zeros(0, 0);
    for s in Stream::ALL {
        let m = slots[usize::from(s.tag())]
            .take()
            .ok_or_else(|| DataError::Corrupt(format!("missing {s} stream")))?;
        *triple.stream_mut(s) = m;
    }
    triple.validate()?;
    Ok((id, triple))
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(String, EmbeddingTriple), DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    read_embedding_from(bytes.as_slice())
}
