//! Closed whitespace-token vocabulary with reserved control tokens.
//!
//! Ids are assigned in a fixed order: the six reserved tokens first, then
//! one `<NAME>` control token per domain, then the content tokens of the
//! corpus in sorted order. Building the same vocabulary from the same
//! corpus therefore always yields the same token/id bijection.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. Valid ids are dense in `0..vocab.len()`.
pub type TokenId = u32;

/// Index of a domain within a corpus, bijective with its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub usize);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const SOC: &str = "<_soc_>";
pub const EOC: &str = "<_eoc_>";
pub const REDACTED: &str = "<REDACTED>";
pub const UNK: &str = "<unk>";
pub const SYS_SPEAKER: &str = "SYS:";
pub const USR_SPEAKER: &str = "USR:";

/// Reserved ids, fixed independently of the corpus.
pub const SOC_ID: TokenId = 0;
pub const EOC_ID: TokenId = 1;
pub const REDACTED_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const SYS_ID: TokenId = 4;
pub const USR_ID: TokenId = 5;

const RESERVED: [&str; 6] = [SOC, EOC, REDACTED, UNK, SYS_SPEAKER, USR_SPEAKER];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    domain_names: Vec<String>,
}

impl Vocabulary {
    /// Build a vocabulary for the given domains plus the content tokens.
    /// Content tokens are deduplicated and sorted before id assignment.
    pub fn build<I, S>(domain_names: &[String], content_tokens: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for name in domain_names {
            tokens.push(format!("<{name}>"));
        }
        let mut content: Vec<String> = content_tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| !tokens.contains(t))
            .collect();
        content.sort();
        content.dedup();
        tokens.extend(content);

        let mut vocab = Vocabulary {
            tokens,
            index: HashMap::new(),
            domain_names: domain_names.to_vec(),
        };
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    /// Restore the lookup index after deserialization.
    pub fn from_tokens(tokens: Vec<String>, domain_names: Vec<String>) -> Vocabulary {
        let mut vocab = Vocabulary {
            tokens,
            index: HashMap::new(),
            domain_names,
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn domain_name(&self, domain: DomainId) -> &str {
        &self.domain_names[domain.0]
    }

    pub fn domain_by_name(&self, name: &str) -> Option<DomainId> {
        self.domain_names
            .iter()
            .position(|n| n == name)
            .map(DomainId)
    }

    /// Id of the `<NAME>` control token for a domain.
    pub fn domain_token_id(&self, domain: DomainId) -> TokenId {
        (RESERVED.len() + domain.0) as TokenId
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the `<unk>` id when absent.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidTokenId(id))
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Reserved ids: the six fixed control/special tokens plus the
    /// per-domain control tokens. Policies never label these private and
    /// classifier features ignore them.
    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < RESERVED.len() + self.domain_names.len()
    }

    /// Control tokens used as generation stopping criteria: conversation
    /// boundaries, domain tokens, and speaker tokens. `<REDACTED>` and
    /// `<unk>` are not stop tokens.
    pub fn stop_token_ids(&self) -> Vec<TokenId> {
        let mut ids = vec![SOC_ID, EOC_ID, SYS_ID, USR_ID];
        for d in 0..self.domain_names.len() {
            ids.push(self.domain_token_id(DomainId(d)));
        }
        ids
    }

    /// Ids of every content (non-reserved) token.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (RESERVED.len() + self.domain_names.len()..self.tokens.len()).map(|i| i as TokenId)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter().map(|&id| self.token(id)).collect()
    }
}
