//! Binary dataset files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        8 bytes  "ENCDATA1"
//! channels     u32
//! height       u32
//! width        u32
//! classes      u32
//! n_train      u32
//! n_validation u32
//! train inputs       f32 × n_train·C·H·W   (item, channel, row, column)
//! train labels       u32 × n_train
//! validation inputs  f32 × n_validation·C·H·W
//! validation labels  u32 × n_validation
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{EncError, Result};

const MAGIC: &[u8; 8] = b"ENCDATA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniDataset {
    /// `[channels, height, width]` of one item.
    pub shape: [usize; 3],
    pub classes: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
}

impl MiniDataset {
    pub fn new(shape: [usize; 3], classes: usize, inputs: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let item = shape.iter().product::<usize>();
        if item == 0 || inputs.len() != item * labels.len() {
            return Err(EncError::Shape(format!(
                "{} input values do not hold {} items of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(EncError::Shape(format!("label {bad} not below class count {classes}")));
        }
        Ok(MiniDataset {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self, index: usize) -> &[f32] {
        let n = self.item_len();
        &self.inputs[index * n..(index + 1) * n]
    }

    /// Items at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> MiniDataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            inputs.extend_from_slice(self.item(i));
        }
        MiniDataset {
            shape: self.shape,
            classes: self.classes,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub train: MiniDataset,
    pub validation: MiniDataset,
}

impl DatasetFile {
    pub fn split(&self, split: Split) -> &MiniDataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| EncError::io(path, e))?;
        read_dataset(&mut BufReader::new(file)).map_err(|e| match e {
            ReadError::Io(source) => EncError::io(path, source),
            ReadError::Format(message) => EncError::Parse {
                path: path.to_path_buf(),
                message,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.train.shape != self.validation.shape || self.train.classes != self.validation.classes {
            return Err(EncError::Shape("train and validation splits disagree on shape".into()));
        }
        let file = File::create(path).map_err(|e| EncError::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_dataset(self, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| EncError::io(path, e))
    }
}

enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

fn read_dataset<R: Read>(r: &mut R) -> std::result::Result<DatasetFile, ReadError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ReadError::Format("not a dataset file (bad magic)".into()));
    }
    let mut header = [0u32; 6];
    r.read_u32_into::<LittleEndian>(&mut header)?;
    let [c, h, w, classes, n_train, n_val] = header.map(|v| v as usize);
    let shape = [c, h, w];
    let mut read_split = |n: usize| -> std::result::Result<MiniDataset, ReadError> {
        let mut inputs = vec![0f32; n * c * h * w];
        r.read_f32_into::<LittleEndian>(&mut inputs)?;
        let mut labels = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut labels)?;
        MiniDataset::new(shape, classes, inputs, labels).map_err(|e| ReadError::Format(e.to_string()))
    };
    let train = read_split(n_train)?;
    let validation = read_split(n_val)?;
    Ok(DatasetFile { train, validation })
}

fn write_dataset<W: Write>(data: &DatasetFile, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    let [c, h, wd] = data.train.shape;
    for v in [c, h, wd, data.train.classes, data.train.len(), data.validation.len()] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for split in [&data.train, &data.validation] {
        for &x in &split.inputs {
            w.write_f32::<LittleEndian>(x)?;
        }
        for &l in &split.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
    }
    Ok(())
}
