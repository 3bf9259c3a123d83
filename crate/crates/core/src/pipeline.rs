//! Task registry and the sequential driver that runs a pipeline of tasks
//! against an [`OptionsStore`].
//!
//! A task reads its inputs from a read-only view of the store and returns a
//! fresh store; the driver files it under `results.<category>`. A task marked
//! [`TaskMode::Inject`] is skipped and the pre-seeded `results.<category>`
//! entry is used in its place.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::options::{OptionsStore, Value};
use crate::tasks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Split,
    Kernel,
    Paramsel,
    Rls,
    Pred,
    Perf,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Split,
        Category::Kernel,
        Category::Paramsel,
        Category::Rls,
        Category::Pred,
        Category::Perf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Split => "split",
            Category::Kernel => "kernel",
            Category::Paramsel => "paramsel",
            Category::Rls => "rls",
            Category::Pred => "pred",
            Category::Perf => "perf",
        }
    }

    /// Store path the driver files this category's result under.
    pub fn result_key(self) -> String {
        format!("results.{}", self.as_str())
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Registry(format!("unknown task category '{s}'")))
    }
}

/// Read-only access to the store for the duration of one task.
pub struct OptionsView<'a> {
    store: &'a OptionsStore,
    violation: RefCell<Option<String>>,
}

impl<'a> OptionsView<'a> {
    fn new(store: &'a OptionsStore) -> Self {
        OptionsView {
            store,
            violation: RefCell::new(None),
        }
    }

    /// Always fails: tasks may not write to the store. The attempt is also
    /// recorded, so the driver reports it even if the task ignores the error.
    pub fn try_insert(&self, path: &str, _value: impl Into<Value>) -> Result<()> {
        let msg = format!("task attempted to write '{path}' to the read-only options view");
        self.violation.borrow_mut().get_or_insert_with(|| msg.clone());
        Err(Error::ContractViolation(msg))
    }

    fn take_violation(&self) -> Option<String> {
        self.violation.borrow_mut().take()
    }
}

impl Deref for OptionsView<'_> {
    type Target = OptionsStore;

    fn deref(&self) -> &OptionsStore {
        self.store
    }
}

pub type TaskFn = Arc<dyn Fn(&OptionsView) -> Result<OptionsStore> + Send + Sync>;

#[derive(Clone)]
struct TaskEntry {
    func: TaskFn,
    requires: Vec<Category>,
}

#[derive(Clone, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<(Category, String), TaskEntry>,
}

impl fmt::Debug for TaskRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.tasks.keys().map(|(c, n)| format!("{c}.{n}")))
            .finish()
    }
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in task.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        tasks::register_builtins(&mut r).expect("built-in task names are unique");
        r
    }

    /// Registers `func` as `category.name`. `requires` lists the categories
    /// whose results must exist before the task runs.
    pub fn register<F>(&mut self, category: Category, name: &str, requires: &[Category], func: F) -> Result<()>
    where
        F: Fn(&OptionsView) -> Result<OptionsStore> + Send + Sync + 'static,
    {
        let key = (category, name.to_string());
        if self.tasks.contains_key(&key) {
            return Err(Error::Registry(format!(
                "task '{category}.{name}' is already registered"
            )));
        }
        self.tasks.insert(
            key,
            TaskEntry {
                func: Arc::new(func),
                requires: requires.to_vec(),
            },
        );
        Ok(())
    }

    pub fn contains(&self, category: Category, name: &str) -> bool {
        self.tasks.contains_key(&(category, name.to_string()))
    }

    /// Registered implementation names for `category`.
    pub fn names(&self, category: Category) -> Vec<&str> {
        self.tasks
            .keys()
            .filter(|(c, _)| *c == category)
            .map(|(_, n)| n.as_str())
            .collect()
    }

    fn entry(&self, category: Category, name: &str) -> Result<&TaskEntry> {
        self.tasks.get(&(category, name.to_string())).ok_or_else(|| {
            Error::Registry(format!(
                "no task '{name}' in category '{category}' (available: {})",
                self.names(category).join(", ")
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Run,
    /// Skip; use the result already present in the store.
    Inject,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub category: Category,
    #[serde(rename = "impl")]
    pub impl_name: String,
    #[serde(default)]
    pub mode: TaskMode,
}

impl TaskDescriptor {
    pub fn run(category: Category, impl_name: &str) -> Self {
        TaskDescriptor {
            category,
            impl_name: impl_name.to_string(),
            mode: TaskMode::Run,
        }
    }

    pub fn inject(category: Category) -> Self {
        TaskDescriptor {
            category,
            impl_name: "inject".to_string(),
            mode: TaskMode::Inject,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub name: String,
    pub tasks: Vec<TaskDescriptor>,
}

impl Pipeline {
    pub fn new(name: &str, tasks: Vec<TaskDescriptor>) -> Self {
        Pipeline {
            name: name.to_string(),
            tasks,
        }
    }

    /// Checks registrations, dependency order and injected results against
    /// the store the pipeline would start from.
    pub fn validate(&self, registry: &TaskRegistry, opt: &OptionsStore) -> Result<()> {
        let mut available: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|c| opt.contains(&c.result_key()))
            .collect();
        for t in &self.tasks {
            match t.mode {
                TaskMode::Disabled => {}
                TaskMode::Inject => {
                    if !opt.contains(&t.category.result_key()) {
                        return Err(Error::Pipeline {
                            category: t.category.to_string(),
                            detail: format!("marked inject but '{}' is not set", t.category.result_key()),
                        });
                    }
                }
                TaskMode::Run => {
                    let entry = registry.entry(t.category, &t.impl_name)?;
                    if available.contains(&t.category) {
                        return Err(Error::Pipeline {
                            category: t.category.to_string(),
                            detail: format!(
                                "'{}' already holds a result; results are write-once",
                                t.category.result_key()
                            ),
                        });
                    }
                    if let Some(missing) = entry.requires.iter().find(|c| !available.contains(c)) {
                        return Err(Error::Pipeline {
                            category: t.category.to_string(),
                            detail: format!(
                                "task '{}' needs a {missing} result from an earlier task or injection",
                                t.impl_name
                            ),
                        });
                    }
                    available.push(t.category);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub category: Category,
    #[serde(rename = "impl")]
    pub impl_name: String,
    pub seconds: f64,
}

/// Runs `pipeline` and returns the enriched store.
pub fn run_pipeline(pipeline: &Pipeline, registry: &TaskRegistry, opt: OptionsStore) -> Result<OptionsStore> {
    run_pipeline_timed(pipeline, registry, opt).map(|(store, _)| store)
}

/// [`run_pipeline`], also returning the wall-clock time of each executed task.
pub fn run_pipeline_timed(
    pipeline: &Pipeline,
    registry: &TaskRegistry,
    mut opt: OptionsStore,
) -> Result<(OptionsStore, Vec<StageTiming>)> {
    pipeline.validate(registry, &opt)?;
    let mut timings = Vec::new();
    for t in pipeline.tasks.iter().filter(|t| t.mode == TaskMode::Run) {
        let entry = registry.entry(t.category, &t.impl_name)?;
        let start = Instant::now();
        let view = OptionsView::new(&opt);
        let outcome = (entry.func)(&view);
        let violation = view.take_violation();
        let task_name = format!("{}.{}", t.category, t.impl_name);
        if let Some(msg) = violation {
            return Err(Error::Task {
                task: task_name,
                source: Box::new(Error::ContractViolation(msg)),
            });
        }
        let result = outcome.map_err(|e| Error::Task {
            task: task_name,
            source: Box::new(e),
        })?;
        opt.insert(&t.category.result_key(), result)?;
        timings.push(StageTiming {
            category: t.category,
            impl_name: t.impl_name.clone(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((opt, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_registry() -> TaskRegistry {
        let mut r = TaskRegistry::new();
        r.register(Category::Split, "const", &[], |_| {
            let mut s = OptionsStore::new();
            s.insert("value", 2.0)?;
            Ok(s)
        })
        .unwrap();
        r.register(Category::Kernel, "double", &[Category::Split], |v| {
            let mut s = OptionsStore::new();
            s.insert("value", 2.0 * v.f64("results.split.value")?)?;
            Ok(s)
        })
        .unwrap();
        r
    }

    #[test]
    fn register_run_round_trip() {
        let r = counting_registry();
        let p = Pipeline::new(
            "p",
            vec![
                TaskDescriptor::run(Category::Split, "const"),
                TaskDescriptor::run(Category::Kernel, "double"),
            ],
        );
        let out = run_pipeline(&p, &r, OptionsStore::new()).unwrap();
        assert_eq!(out.f64("results.kernel.value").unwrap(), 4.0);
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut r = counting_registry();
        assert!(matches!(
            r.register(Category::Split, "const", &[], |_| Ok(OptionsStore::new())),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let mut opt = OptionsStore::new();
        opt.insert("a", 1i64).unwrap();
        let out = run_pipeline(&Pipeline::default(), &TaskRegistry::new(), opt.clone()).unwrap();
        assert_eq!(out, opt);
    }

    #[test]
    fn missing_dependency_and_injection_reported() {
        let r = counting_registry();
        let p = Pipeline::new("p", vec![TaskDescriptor::run(Category::Kernel, "double")]);
        match run_pipeline(&p, &r, OptionsStore::new()) {
            Err(Error::Pipeline { category, .. }) => assert_eq!(category, "kernel"),
            other => panic!("unexpected {other:?}"),
        }
        let p = Pipeline::new(
            "p",
            vec![
                TaskDescriptor::inject(Category::Split),
                TaskDescriptor::run(Category::Kernel, "double"),
            ],
        );
        match run_pipeline(&p, &r, OptionsStore::new()) {
            Err(Error::Pipeline { category, .. }) => assert_eq!(category, "split"),
            other => panic!("unexpected {other:?}"),
        }
        let mut opt = OptionsStore::new();
        opt.insert("results.split.value", 5.0).unwrap();
        let out = run_pipeline(&p, &r, opt).unwrap();
        assert_eq!(out.f64("results.kernel.value").unwrap(), 10.0);
    }

    #[test]
    fn unknown_task_and_rerun_rejected() {
        let r = counting_registry();
        let p = Pipeline::new("p", vec![TaskDescriptor::run(Category::Split, "nope")]);
        assert!(matches!(
            run_pipeline(&p, &r, OptionsStore::new()),
            Err(Error::Registry(_))
        ));
        let p = Pipeline::new("p", vec![TaskDescriptor::run(Category::Split, "const")]);
        let once = run_pipeline(&p, &r, OptionsStore::new()).unwrap();
        assert!(matches!(run_pipeline(&p, &r, once), Err(Error::Pipeline { .. })));
    }

    #[test]
    fn writes_through_view_are_violations() {
        let mut r = TaskRegistry::new();
        r.register(Category::Split, "sneaky", &[], |v| {
            let _ = v.try_insert("results.split.x", 1.0);
            Ok(OptionsStore::new())
        })
        .unwrap();
        let p = Pipeline::new("p", vec![TaskDescriptor::run(Category::Split, "sneaky")]);
        match run_pipeline(&p, &r, OptionsStore::new()) {
            Err(Error::Task { source, .. }) => assert!(matches!(*source, Error::ContractViolation(_))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn task_failure_names_task() {
        let mut r = TaskRegistry::new();
        r.register(Category::Perf, "broken", &[], |v| {
            v.f64("missing").map(|_| OptionsStore::new())
        })
        .unwrap();
        let p = Pipeline::new("p", vec![TaskDescriptor::run(Category::Perf, "broken")]);
        match run_pipeline(&p, &r, OptionsStore::new()) {
            Err(Error::Task { task, .. }) => assert_eq!(task, "perf.broken"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn category_names_parse() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
        assert!("training".parse::<Category>().is_err());
    }
}
