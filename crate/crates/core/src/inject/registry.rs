//! Cooperative in-process interposition: instrumented code announces its
//! call points, and hooks route calls at a point through a controller.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use super::{CallVerdict, Controller};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown injection point `{0}`")]
    UnknownPoint(String),
}

type Hook = (u64, Arc<Controller>);

#[derive(Default)]
pub struct Registry {
    points: RwLock<BTreeMap<String, Option<Hook>>>,
    next_id: RwLock<u64>,
}

/// Identifies an installed hook; pass it to [`Registry::uninstall`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookHandle {
    pub point: String,
    id: u64,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    /// Announces a call point. Registering twice is harmless.
    pub fn register(&self, point: &str) {
        self.points
            .write()
            .unwrap()
            .entry(point.to_string())
            .or_insert(None);
    }

    pub fn points(&self) -> Vec<String> {
        self.points.read().unwrap().keys().cloned().collect()
    }

    /// Routes every call at `point` through `controller`, replacing any
    /// previous hook there.
    pub fn install_hook(&self, point: &str, controller: Arc<Controller>) -> Result<HookHandle, RegistryError> {
        let mut points = self.points.write().unwrap();
        let slot = points
            .get_mut(point)
            .ok_or_else(|| RegistryError::UnknownPoint(point.to_string()))?;
        let mut next = self.next_id.write().unwrap();
        *next += 1;
        *slot = Some((*next, controller));
        Ok(HookHandle {
            point: point.to_string(),
            id: *next,
        })
    }

    /// Restores pass-through at the hook's point. Stale handles are ignored.
    pub fn uninstall(&self, handle: &HookHandle) {
        if let Some(slot) = self.points.write().unwrap().get_mut(&handle.point) {
            if slot.as_ref().is_some_and(|(id, _)| *id == handle.id) {
                *slot = None;
            }
        }
    }

    pub fn uninstall_all(&self) {
        for slot in self.points.write().unwrap().values_mut() {
            *slot = None;
        }
    }

    /// Called by instrumented code at `point` with the result it is about
    /// to return. `None` means proceed normally. Corruption failures are
    /// recorded by the controller and the call proceeds unchanged.
    pub fn call(&self, point: &str, path_hint: Option<&str>, payload: &[u8]) -> Option<CallVerdict> {
        let controller = {
            let points = self.points.read().unwrap();
            match points.get(point) {
                Some(Some((_, c))) => Arc::clone(c),
                _ => return None,
            }
        };
        controller.intercept_call(point, path_hint, payload).ok().flatten()
    }
}
