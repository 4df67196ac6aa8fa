//! Token vocabulary. The file format is one token per line; the line index is
//! the token id. Ids below [`FIRST_ORDINARY`] are reserved markers.

use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Summary position prepended by the explanation encoder.
pub const CLS: usize = 3;
pub const UNK: usize = 4;
pub const FIRST_ORDINARY: usize = 5;

pub const RESERVED: [&str; FIRST_ORDINARY] = ["<pad>", "<bos>", "<eos>", "<cls>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from ordinary tokens; reserved markers are
    /// prepended.
    pub fn new<S: Into<String>>(ordinary: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ordinary.into_iter().map(Into::into));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < FIRST_ORDINARY || tokens[..FIRST_ORDINARY].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("vocabulary must start with reserved tokens {RESERVED:?}"),
            });
        }
        Ok(Self { tokens })
    }
}
