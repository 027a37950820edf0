//! The bundled diligence pack and the loader for pack directories.
//!
//! A pack directory holds `manifest.json`, a fixture directory and a
//! corpus file. Directories listed in `LOGGRAPH_PACK_PATH` are searched by
//! pack name before the copy compiled into the binary.

mod corpus;
mod diligence;
mod manifest;

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub use corpus::{Document, DocumentError, DocumentStore, FetchTool, SearchTool};
pub use manifest::{BehaviorSpec, Manifest};

use crate::behavior::SubscriptionError;
use crate::budget::BudgetError;
use crate::effects::{FixtureError, FixtureProvider, FixtureSet};
use crate::event::types;
use crate::log::EventLog;
use crate::runtime::{PackSchema, RegisterError, RunError, RunOptions, RunOutcome, Runtime, Step};

pub const PACK_PATH_VAR: &str = "LOGGRAPH_PACK_PATH";
pub const QUICKSTART_RUN: &str = "quickstart";

const BUNDLED_MANIFEST: &str = include_str!("../../packs/diligence/manifest.json");
const BUNDLED_CORPUS: &str = include_str!("../../packs/diligence/corpus.json");

macro_rules! fixtures {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../packs/diligence/fixtures/", $name)))),*]
    };
}

const BUNDLED_FIXTURES: &[(&str, &str)] = fixtures![
    "memo-northwind.json",
    "memo-pinecone.json",
    "memo-stellar.json",
    "planner.json",
    "questions-northwind.json",
    "questions-pinecone.json",
    "questions-stellar.json",
    "research-northwind-1.json",
    "research-northwind-2.json",
    "research-northwind-3.json",
    "research-pinecone-1.json",
    "research-pinecone-2.json",
    "research-pinecone-3.json",
    "research-stellar-1.json",
    "research-stellar-2.json",
    "research-stellar-3.json",
    "risk-northwind.json",
    "risk-pinecone.json",
    "risk-stellar.json",
];

#[derive(Debug, thiserror::Error)]
pub enum PackError {
    #[error("pack {0:?} not found in {PACK_PATH_VAR} or the bundled packs")]
    NotFound(String),
    #[error("the log loads no named pack")]
    Unnamed,
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid {what}: {source}")]
    Parse { what: String, source: serde_json::Error },
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("the pack has no body for behavior {0:?}")]
    UnknownBehavior(String),
    #[error("behavior {name:?}: {source}")]
    Subscription { name: String, source: SubscriptionError },
    #[error("patterns name undeclared types: {0:?}")]
    UndeclaredTypes(Vec<String>),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// A loaded pack: manifest, fixtures and document corpus.
#[derive(Debug, Clone)]
pub struct Pack {
    pub manifest: Manifest,
    pub fixtures: FixtureSet,
    pub corpus: DocumentStore,
}

fn parse_err(what: &str) -> impl FnOnce(serde_json::Error) -> PackError + '_ {
    move |source| PackError::Parse { what: what.to_string(), source }
}

impl Pack {
    /// The diligence pack compiled into this build.
    pub fn bundled() -> Pack {
        let manifest = Manifest::parse(BUNDLED_MANIFEST).expect("bundled manifest parses");
        let fixtures = BUNDLED_FIXTURES
            .iter()
            .map(|(name, text)| FixtureSet::parse(name, text))
            .collect::<Result<Vec<_>, _>>()
            .and_then(FixtureSet::new)
            .expect("bundled fixtures parse");
        let corpus = DocumentStore::parse(BUNDLED_CORPUS).expect("bundled corpus parses");
        Pack { manifest, fixtures, corpus }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Pack, PackError> {
        let dir = dir.as_ref();
        let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|source| PackError::Io { path: p, source });
        let manifest = Manifest::parse(&read(dir.join("manifest.json"))?).map_err(parse_err("manifest"))?;
        let fixtures = FixtureSet::load_dir(dir.join(&manifest.fixtures))?;
        let corpus = DocumentStore::parse(&read(dir.join(&manifest.corpus))?).map_err(parse_err("corpus"))?;
        Ok(Pack { manifest, fixtures, corpus })
    }

    /// Finds `name` on the search path, falling back to the bundled pack.
    pub fn locate(name: &str) -> Result<Pack, PackError> {
        if let Some(paths) = std::env::var_os(PACK_PATH_VAR) {
            for dir in std::env::split_paths(&paths) {
                let candidate = dir.join(name);
                if candidate.join("manifest.json").is_file() {
                    return Pack::load(candidate);
                }
            }
        }
        match name {
            "diligence" => Ok(Pack::bundled()),
            other => Err(PackError::NotFound(other.to_string())),
        }
    }

    /// `spec` is a pack directory or a name to [`locate`](Pack::locate).
    pub fn open(spec: &str) -> Result<Pack, PackError> {
        let dir = Path::new(spec);
        if dir.join("manifest.json").is_file() {
            Pack::load(dir)
        } else {
            Pack::locate(spec)
        }
    }

    /// The pack named by the log's `pack.loaded` event.
    pub fn for_log(log: &EventLog) -> Result<Pack, PackError> {
        let name = log
            .events()
            .iter()
            .find(|e| e.kind == types::PACK_LOADED)
            .and_then(|e| e.payload.get("name")?.as_str())
            .ok_or(PackError::Unnamed)?;
        Pack::open(name)
    }

    /// The same pack with one behavior removed from the manifest.
    pub fn without_behavior(mut self, name: &str) -> Pack {
        self.manifest.behaviors.retain(|b| b.name != name);
        self
    }

    pub fn schema(&self) -> PackSchema {
        PackSchema {
            name: self.manifest.name.clone(),
            version: self.manifest.version.clone(),
            object_types: self.manifest.object_types.clone(),
            relation_types: self.manifest.relation_types.clone(),
            event_types: self.manifest.event_types.clone(),
        }
    }

    /// Registers the manifest's behaviors, in order, and the corpus tools.
    pub fn runtime(&self) -> Result<Runtime, PackError> {
        let undeclared = self.manifest.undeclared_pattern_types();
        if !undeclared.is_empty() {
            return Err(PackError::UndeclaredTypes(undeclared));
        }
        let mut rt = Runtime::with_schema(self.schema());
        for spec in &self.manifest.behaviors {
            let behavior = diligence::behavior(spec)
                .ok_or_else(|| PackError::UnknownBehavior(spec.name.clone()))?
                .map_err(|source| PackError::Subscription { name: spec.name.clone(), source })?;
            rt.register(behavior)?;
        }
        for tool in &self.manifest.tools {
            match tool.as_str() {
                "document_store.search" => rt.register_tool(tool.clone(), SearchTool(self.corpus.clone())),
                "document_store.fetch" => rt.register_tool(tool.clone(), FetchTool(self.corpus.clone())),
                _ => {}
            }
        }
        Ok(rt)
    }

    pub fn provider(&self) -> FixtureProvider {
        FixtureProvider::new(self.fixtures.clone())
    }

    /// Default options with the manifest's budget.
    pub fn options(&self) -> Result<RunOptions, PackError> {
        Ok(RunOptions { budget: self.manifest.budget()?, ..RunOptions::default() })
    }

    /// Start, load the pack, create the goal, finish.
    pub fn script(&self) -> Vec<Step> {
        Step::script([Step::user_object("goal", self.manifest.goal.clone())])
    }

    /// Runs the demo with `budget` caps layered over the manifest's.
    pub fn quickstart(&self, budget: &[(String, Value)]) -> Result<RunOutcome, PackError> {
        let runtime = self.runtime()?;
        let mut options = self.options()?;
        for (k, v) in budget {
            options.budget.set(k, v)?;
        }
        let mut provider = self.provider();
        Ok(runtime.execute(QUICKSTART_RUN, &self.script(), &mut provider, options)?)
    }

    pub fn describe(&self) -> Value {
        json!({
            "name": self.manifest.name,
            "version": self.manifest.version,
            "behaviors": self.manifest.behaviors.iter().map(|b| b.name.as_str()).collect::<Vec<_>>(),
            "fixtures": self.fixtures.fixtures().len(),
            "documents": self.corpus.documents().len(),
        })
    }
}
