use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte tokens split into a training prefix and a validation suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    /// Splits at `floor(0.9 n)`. Needs `context_len + 1` bytes in total and
    /// at least two on each side of the split.
    pub fn from_bytes(bytes: Vec<u8>, context_len: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Input("corpus is empty".into()));
        }
        if bytes.len() < context_len + 1 {
            return Err(Error::Input(format!(
                "corpus has {} bytes; a context of {context_len} needs at least {}",
                bytes.len(),
                context_len + 1
            )));
        }
        let cut = bytes.len() * 9 / 10;
        if cut < 2 || bytes.len() - cut < 2 {
            return Err(Error::Input(format!(
                "corpus of {} bytes is too short to split into training and validation parts",
                bytes.len()
            )));
        }
        let val = bytes[cut..].to_vec();
        let mut train = bytes;
        train.truncate(cut);
        Ok(Corpus { train, val })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw bytes of `path` as token ids.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

/// Size of [`desk_corpus`].
pub const DESK_CORPUS_BYTES: usize = 64 * 1024;

/// Fixed 64 KiB text of short sentences drawn from a tiny grammar.
pub fn desk_corpus() -> Vec<u8> {
    const SUBJECTS: [&str; 6] = ["the cat", "a small dog", "the old man", "my sister", "the bird", "a farmer"];
    const VERBS: [&str; 5] = ["sees", "likes", "carries", "finds", "paints"];
    const OBJECTS: [&str; 6] = ["the red ball", "a green box", "the garden", "some bread", "the boat", "a letter"];
    const PLACES: [&str; 4] = ["at home", "by the river", "in the morning", "near the hill"];
    let mut rng = ChaCha8Rng::seed_from_u64(0x64_6b);
    let mut out = String::with_capacity(DESK_CORPUS_BYTES + 64);
    while out.len() < DESK_CORPUS_BYTES {
        let pick = |xs: &[&'static str], rng: &mut ChaCha8Rng| *xs.choose(rng).expect("non-empty");
        out.push_str(pick(&SUBJECTS, &mut rng));
        out.push(' ');
        out.push_str(pick(&VERBS, &mut rng));
        out.push(' ');
        out.push_str(pick(&OBJECTS, &mut rng));
        out.push(' ');
        out.push_str(pick(&PLACES, &mut rng));
        out.push_str(".\n");
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(DESK_CORPUS_BYTES);
    bytes
}
