//! Search sandbox backed by a scripted page graph: a results page whose
//! link regions lead to content pages.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sim::Rect;
use super::sprites::{parse_layout, render_tiles};
use super::{primitives_for, Capabilities, Command, CommandOutput, EnvError, Environment, Primitive};
use crate::actions::{Action, GroundedAction, ScreenGeometry};
use crate::trajectory::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub region: Rect,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub url: String,
    #[serde(default)]
    pub title: String,
    pub layout: Vec<String>,
    #[serde(default)]
    pub text: Vec<String>,
    #[serde(default)]
    pub links: Vec<Link>,
}

fn sandbox_screen() -> ScreenGeometry {
    ScreenGeometry::new(960, 540).expect("non-zero")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageGraph {
    /// Id of the results page every sandbox starts on.
    pub results: String,
    pub pages: BTreeMap<String, Page>,
    #[serde(default = "sandbox_screen")]
    pub screen: ScreenGeometry,
}

impl PageGraph {
    pub fn validate(&self) -> Result<(), String> {
        if !self.pages.contains_key(&self.results) {
            return Err(format!("results page {:?} is not defined", self.results));
        }
        for (id, p) in &self.pages {
            parse_layout(&p.layout).map_err(|e| format!("page {id}: {e}"))?;
            for l in &p.links {
                if !self.pages.contains_key(&l.to) {
                    return Err(format!("page {id}: link to unknown page {:?}", l.to));
                }
            }
        }
        Ok(())
    }
}

pub struct SearchSandbox {
    graph: Arc<PageGraph>,
    handle: String,
    query: String,
    history: Vec<String>,
    last_primitives: Option<Vec<Primitive>>,
}

impl SearchSandbox {
    pub fn new(graph: Arc<PageGraph>, handle: impl Into<String>, query: impl Into<String>) -> Self {
        let start = graph.results.clone();
        SearchSandbox {
            graph,
            handle: handle.into(),
            query: query.into(),
            history: vec![start],
            last_primitives: None,
        }
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn page_id(&self) -> &str {
        self.history.last().expect("history never empty")
    }

    pub fn page(&self) -> &Page {
        &self.graph.pages[self.page_id()]
    }

    fn snapshot(&self) -> Observation {
        let grid = parse_layout(&self.page().layout).expect("validated");
        Observation::new(render_tiles(&grid, self.graph.screen.width, self.graph.screen.height), 0)
    }
}

impl Environment for SearchSandbox {
    fn handle_id(&self) -> String {
        self.handle.clone()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            gui_primitives: true,
            command_channel: false,
            search_sandbox: true,
            ocr: false,
        }
    }

    fn screen(&self) -> ScreenGeometry {
        self.graph.screen
    }

    fn reset(&mut self, _task_id: &str) -> Result<Observation, EnvError> {
        self.history.truncate(1);
        Ok(self.snapshot())
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        Ok(self.snapshot())
    }

    fn execute(&mut self, ga: &GroundedAction) -> Result<Observation, EnvError> {
        let prims = primitives_for(ga)?;
        match &ga.action {
            Action::Click { .. } => {
                let p = ga.points[0];
                if let Some(link) = self.page().links.iter().find(|l| l.region.contains(p)) {
                    let to = link.to.clone();
                    self.history.push(to);
                }
            }
            Action::Hotkey { keys } if keys == &["alt", "left"] => {
                if self.history.len() > 1 {
                    self.history.pop();
                }
            }
            _ => {}
        }
        self.last_primitives = Some(prims);
        Ok(self.snapshot())
    }

    fn command(&mut self, _cmd: &Command) -> Result<CommandOutput, EnvError> {
        Err(EnvError::UnsupportedCapability("command_channel".into()))
    }

    fn last_primitives(&self) -> Option<Vec<Primitive>> {
        self.last_primitives.clone()
    }

    fn location(&self) -> Option<String> {
        Some(self.page().url.clone())
    }
}

/// Opens numbered sandboxes over one shared page graph.
#[derive(Debug)]
pub struct PageGraphFactory {
    graph: Arc<PageGraph>,
    opened: AtomicUsize,
}

impl PageGraphFactory {
    pub fn new(graph: PageGraph) -> Self {
        PageGraphFactory {
            graph: Arc::new(graph),
            opened: AtomicUsize::new(0),
        }
    }

    pub fn opened(&self) -> usize {
        self.opened.load(Ordering::Relaxed)
    }
}

impl super::SandboxFactory for PageGraphFactory {
    fn open(&self, query: &str) -> Result<Box<dyn Environment>, EnvError> {
        let n = self.opened.fetch_add(1, Ordering::Relaxed);
        Ok(Box::new(SearchSandbox::new(self.graph.clone(), format!("sandbox:{n}"), query)))
    }
}
