use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a language within a [`LanguageSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LangId(pub usize);

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const ENGLISH: &str = "en";

/// Ordered set of target languages, each selected by a `<2XX>` tag token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSet {
    codes: Vec<String>,
}

impl LanguageSet {
    pub fn new<S: AsRef<str>>(codes: &[S]) -> Result<Self> {
        let mut out: Vec<String> = Vec::with_capacity(codes.len());
        for c in codes {
            let c = c.as_ref().trim().to_lowercase();
            if c.is_empty() || !c.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
                return Err(Error::Config(format!("invalid language code `{c}`")));
            }
            if out.contains(&c) {
                return Err(Error::Config(format!("duplicate language code `{c}`")));
            }
            out.push(c);
        }
        if out.is_empty() {
            return Err(Error::Config("empty language set".into()));
        }
        Ok(Self { codes: out })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = LangId> + '_ {
        (0..self.codes.len()).map(LangId)
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, id: LangId) -> &str {
        &self.codes[id.0]
    }

    pub fn id(&self, code: &str) -> Result<LangId> {
        let code = code.trim().to_lowercase();
        self.codes
            .iter()
            .position(|c| *c == code)
            .map(LangId)
            .ok_or(Error::UnknownLanguage(code))
    }

    pub fn check(&self, id: LangId) -> Result<LangId> {
        if id.0 < self.codes.len() {
            Ok(id)
        } else {
            Err(Error::UnknownLanguage(id.to_string()))
        }
    }

    pub fn english(&self) -> Option<LangId> {
        self.id(ENGLISH).ok()
    }

    /// `<2EN>` for `en`.
    pub fn tag(&self, id: LangId) -> String {
        tag_token(self.code(id))
    }
}

pub fn tag_token(code: &str) -> String {
    format!("<2{}>", code.to_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_and_lookup() {
        let set = LanguageSet::new(&["en", "De"]).unwrap();
        assert_eq!(set.tag(LangId(0)), "<2EN>");
        assert_eq!(set.id("de").unwrap(), LangId(1));
        assert_eq!(set.english(), Some(LangId(0)));
        assert!(matches!(set.id("fr"), Err(Error::UnknownLanguage(_))));
        assert!(LanguageSet::new(&["en", "en"]).is_err());
        assert!(set.check(LangId(2)).is_err());
    }
}
