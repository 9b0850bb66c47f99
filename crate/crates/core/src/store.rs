//! Replicated message libraries and common-randomness pools.

use sha2::{Digest, Sha256};

use crate::field::{Field, FieldElement, SymbolVector};
use crate::rng::StreamRng;

/// `K` messages of `L` symbols each, stored message-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageStore {
    field: Field,
    messages: usize,
    length: usize,
    symbols: SymbolVector,
}

impl MessageStore {
    pub fn new(
        field: Field,
        messages: usize,
        length: usize,
        symbols: SymbolVector,
    ) -> Option<Self> {
        (symbols.len() == messages * length).then_some(MessageStore {
            field,
            messages,
            length,
            symbols,
        })
    }

    pub fn random(field: Field, messages: usize, length: usize, rng: &mut StreamRng) -> Self {
        let symbols = field.sample_uniform(rng, messages * length);
        MessageStore {
            field,
            messages,
            length,
            symbols,
        }
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn messages(&self) -> usize {
        self.messages
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn get(&self, message: usize, index: usize) -> Option<FieldElement> {
        if message < self.messages && index < self.length {
            self.symbols.get(message * self.length + index)
        } else {
            None
        }
    }

    /// All symbols concatenated message after message (length `K·L`).
    pub fn flattened(&self) -> &SymbolVector {
        &self.symbols
    }

    pub fn message(&self, message: usize) -> Option<&[FieldElement]> {
        (message < self.messages)
            .then(|| &self.symbols.as_slice()[message * self.length..(message + 1) * self.length])
    }
}

/// Randomness shared identically by all databases of one entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommonRandomnessPool {
    symbols: SymbolVector,
}

impl CommonRandomnessPool {
    pub fn new(symbols: SymbolVector) -> Self {
        CommonRandomnessPool { symbols }
    }

    pub fn generate(field: &Field, size: usize, rng: &mut StreamRng) -> Self {
        CommonRandomnessPool {
            symbols: field.sample_uniform(rng, size),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<FieldElement> {
        self.symbols.get(id)
    }

    pub fn symbols(&self) -> &SymbolVector {
        &self.symbols
    }

    /// Hex SHA-256 of the canonical encoding; used to confirm replicas agree.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.symbols.encode()))
    }
}
