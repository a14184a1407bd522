//! Model file: named tensors, then the vocabulary, then the config echo.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Vocabulary};
use crate::serialize::{read_str, read_tensors, read_u32, write_str, write_tensors, write_u32};

const RUNNING_MEAN: &str = "embed.norm.running_mean";
const RUNNING_VAR: &str = "embed.norm.running_var";

impl Model {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut named: Vec<(&str, &crate::Tensor)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        named.push((RUNNING_MEAN, &self.running_mean));
        named.push((RUNNING_VAR, &self.running_var));
        write_tensors(w, &named)?;
        write_u32(w, self.vocab.len() as u32)?;
        for t in self.vocab.tokens() {
            write_str(w, t)?;
        }
        write_str(w, &self.config.to_kv())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let tensors = read_tensors(r)?;
        let n = read_u32(r)? as usize;
        let tokens = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(tokens)?;
        let config = ModelConfig::from_kv(&read_str(r)?)?;

        // Rebuild the layout from the config, then fill in the stored values.
        let mut model = Model::new(config, vocab, 0)?;
        let mut seen = 0;
        for (name, t) in tensors {
            let slot = match name.as_str() {
                RUNNING_MEAN => &mut model.running_mean,
                RUNNING_VAR => &mut model.running_var,
                _ => model.param_mut(&name).ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?,
            };
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
            seen += 1;
        }
        if seen != model.params.len() + 2 {
            return Err(Error::Format(format!("expected {} tensors, found {seen}", model.params.len() + 2)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
