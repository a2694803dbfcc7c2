//! `${KEY}` templates, the template directory and target profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}`: no value bound for key `{key}`")]
    Unbound { template: String, key: String },
    #[error("template `{template}`: unknown key `{key}`")]
    Unknown { template: String, key: String },
}

impl TemplateError {
    pub fn key(&self) -> &str {
        match self {
            TemplateError::Unbound { key, .. } | TemplateError::Unknown { key, .. } => key,
        }
    }
}

pub type Substitutions = BTreeMap<String, String>;

fn is_key(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Key(String),
}

/// A text template. Only `${UPPER_CASE}` sequences are placeholders; any
/// other `$` text passes through unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub body: String,
    pub required_keys: BTreeSet<String>,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(name: &str, body: &str) -> Self {
        let mut pieces = Vec::new();
        let mut required_keys = BTreeSet::new();
        let mut text = String::new();
        let mut rest = body;
        while let Some(start) = rest.find("${") {
            let after = &rest[start + 2..];
            match after.find('}').filter(|&end| is_key(&after[..end])) {
                Some(end) => {
                    text.push_str(&rest[..start]);
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                    let key = after[..end].to_owned();
                    required_keys.insert(key.clone());
                    pieces.push(Piece::Key(key));
                    rest = &after[end + 1..];
                }
                None => {
                    text.push_str(&rest[..start + 2]);
                    rest = after;
                }
            }
        }
        text.push_str(rest);
        pieces.push(Piece::Text(text));
        pieces.retain(|p| !matches!(p, Piece::Text(t) if t.is_empty()));
        Template {
            name: name.to_owned(),
            body: body.to_owned(),
            required_keys,
            pieces,
        }
    }

    pub fn render(&self, subs: &Substitutions) -> Result<String, TemplateError> {
        if let Some(key) = self.required_keys.iter().find(|k| !subs.contains_key(*k)) {
            return Err(TemplateError::Unbound {
                template: self.name.clone(),
                key: key.clone(),
            });
        }
        if let Some(key) = subs.keys().find(|k| !self.required_keys.contains(*k)) {
            return Err(TemplateError::Unknown {
                template: self.name.clone(),
                key: key.clone(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Key(k) => out.push_str(&subs[k]),
            }
        }
        Ok(out)
    }
}

pub const MAIN_TEMPLATE: &str = "main.c.tmpl";
pub const MAKE_SH_TEMPLATE: &str = "make.sh.tmpl";

const BUILTIN: &[(&str, &str)] = &[
    (MAIN_TEMPLATE, include_str!("../../templates/main.c.tmpl")),
    (MAKE_SH_TEMPLATE, include_str!("../../templates/make.sh.tmpl")),
    (
        "makefile_lib.host.tmpl",
        include_str!("../../templates/makefile_lib.host.tmpl"),
    ),
    (
        "makefile_lib.cortex-m4f.tmpl",
        include_str!("../../templates/makefile_lib.cortex-m4f.tmpl"),
    ),
];

#[derive(Debug, Error)]
pub enum TemplateDirError {
    #[error("template `{0}` not found")]
    Missing(String),
    #[error("cannot read `{path}`: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where templates come from: an optional override directory, falling back
/// per file to the templates compiled into the library.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateDir {
    pub root: Option<PathBuf>,
}

impl TemplateDir {
    pub fn builtin() -> Self {
        TemplateDir { root: None }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        TemplateDir { root: Some(root.into()) }
    }

    pub fn load(&self, name: &str) -> Result<Template, TemplateDirError> {
        if let Some(root) = &self.root {
            let path = root.join(name);
            if path.is_file() {
                let body = fs::read_to_string(&path).map_err(|source| TemplateDirError::Read { path, source })?;
                return Ok(Template::parse(name, &body));
            }
        }
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, body)| Template::parse(n, body))
            .ok_or_else(|| TemplateDirError::Missing(name.to_owned()))
    }

    /// Runtime support files under `crt/`, sorted by name. The built-in set
    /// is empty.
    pub fn crt_files(&self) -> Result<Vec<(String, String)>, TemplateDirError> {
        let Some(dir) = self.root.as_ref().map(|r| r.join("crt")) else {
            return Ok(Vec::new());
        };
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let read = |path: &Path| fs::read_to_string(path).map_err(|source| TemplateDirError::Read {
            path: path.to_owned(),
            source,
        });
        let entries = fs::read_dir(&dir).map_err(|source| TemplateDirError::Read {
            path: dir.clone(),
            source,
        })?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|source| TemplateDirError::Read {
                    path: dir.clone(),
                    source,
                })?
                .path();
            let is_c = matches!(path.extension().and_then(|e| e.to_str()), Some("c" | "h"));
            if path.is_file() && is_c {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                files.push((name, read(&path)?));
            }
        }
        files.sort();
        Ok(files)
    }
}

/// Compiler settings for one build target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetProfile {
    pub name: &'static str,
    pub cc: &'static str,
    pub ar: &'static str,
    pub cflags: &'static str,
    pub ldflags: &'static str,
    pub ldlibs: &'static str,
}

pub const PROFILES: &[TargetProfile] = &[
    TargetProfile {
        name: "host",
        cc: "cc",
        ar: "ar",
        cflags: "-std=c99 -O2 -Wall -pedantic",
        ldflags: "",
        ldlibs: "-lm",
    },
    // flags only; never exercised by the test suite
    TargetProfile {
        name: "cortex-m4f",
        cc: "arm-none-eabi-gcc",
        ar: "arm-none-eabi-ar",
        cflags: "-std=c99 -O2 -Wall -mcpu=cortex-m4 -mthumb -mfloat-abi=hard -mfpu=fpv4-sp-d16 -ffunction-sections -fdata-sections",
        ldflags: "-mcpu=cortex-m4 -mthumb -mfloat-abi=hard -mfpu=fpv4-sp-d16 --specs=nosys.specs -Wl,--gc-sections",
        ldlibs: "-lm",
    },
];

pub fn profile(name: &str) -> Option<&'static TargetProfile> {
    PROFILES.iter().find(|p| p.name == name)
}

pub fn profile_names() -> Vec<&'static str> {
    PROFILES.iter().map(|p| p.name).collect()
}

impl TargetProfile {
    pub fn makefile_template(&self) -> String {
        format!("makefile_lib.{}.tmpl", self.name)
    }

    pub fn substitutions(&self) -> Substitutions {
        [
            ("CC", self.cc),
            ("AR", self.ar),
            ("CFLAGS", self.cflags),
            ("LDFLAGS", self.ldflags),
            ("LDLIBS", self.ldlibs),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
    }
}
