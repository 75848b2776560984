//! Guarded state machines and their composed operational semantics.
//!
//! A machine owns locations, typed state variables, and guarded transitions.
//! Each transition either emits one label built from a template, consumes one
//! label matching a template, or moves silently. Machines alone produce
//! singleton events from their output transitions; multi-label events only
//! arise in a [`Product`], where a shared mapping lets labels from different
//! abstraction layers ride inside one event.
//!
//! The product semantics follows the compositional event rules of
//! [`crate::semantics`] over a left-associated machine chain, computed
//! operationally instead of by whole-set comprehension: every label of an
//! event must be engaged by every machine declaring it, at least one engaged
//! transition must be an output, a machine engages at most one label per
//! event, mapped labels force their images into the event, and each chain
//! boundary applies the synchronization and mapping filters of the
//! denotational definitions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::semantics::{
    cond_prime, condmap, Event, Label, Mapping, Process, SemanticsError, SharedVocabulary, Trace,
};

/// Output transitions whose instantiation count exceeds this bound are never
/// enumerated as event seeds; they still participate through matching, so
/// every event needs at least one narrowly templated emitter.
pub const DEFAULT_SEED_SPAN: u64 = 256;

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("machine `{machine}`: unknown state `{state}`")]
    UnknownState { machine: String, state: String },
    #[error("machine `{machine}`: duplicate state `{state}`")]
    DuplicateState { machine: String, state: String },
    #[error("machine `{machine}`: duplicate variable `{var}`")]
    DuplicateVar { machine: String, var: String },
    #[error("machine `{machine}`: unknown domain `{domain}`")]
    UnknownDomain { machine: String, domain: String },
    #[error("machine `{machine}`: unknown signature `{sig}`")]
    UnknownSignature { machine: String, sig: String },
    #[error("machine `{machine}`: signature `{sig}` takes {expected} arguments, got {got}")]
    ArityMismatch {
        machine: String,
        sig: String,
        expected: usize,
        got: usize,
    },
    #[error("machine `{machine}`: constant `{constant}` is not in domain `{domain}`")]
    ConstantOutsideDomain {
        machine: String,
        constant: String,
        domain: String,
    },
    #[error("machine `{machine}`: unknown constant `{constant}`")]
    UnknownConstant { machine: String, constant: String },
    #[error("machine `{machine}`: name `{name}` is neither a binder nor a variable")]
    UnboundName { machine: String, name: String },
    #[error("machine `{machine}`: binder `{binder}` shadows another binder or variable")]
    ShadowedBinder { machine: String, binder: String },
    #[error(
        "machine `{machine}`: binder `{binder}` over domain `{binder_domain}` cannot fill a \
         parameter of domain `{param_domain}`"
    )]
    BinderDomainMismatch {
        machine: String,
        binder: String,
        binder_domain: String,
        param_domain: String,
    },
    #[error("machine `{machine}`: variable `{var}` is not a set")]
    NotASetVar { machine: String, var: String },
    #[error("machine `{machine}`: variable `{var}` is not a scalar")]
    NotAScalarVar { machine: String, var: String },
    #[error(
        "machine `{machine}`: update to `{var}` may produce values outside its domain `{domain}`"
    )]
    UpdateOutsideDomain {
        machine: String,
        var: String,
        domain: String,
    },
    #[error("product needs at least one machine")]
    EmptyProduct,
    #[error("duplicate machine name `{0}` in product")]
    DuplicateMachine(String),
    #[error(
        "mapping entries straddle boundary {boundary} in both directions; each boundary must \
         keep one orientation"
    )]
    MixedOrientation { boundary: usize },
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

// ---------------------------------------------------------------------------
// Source-level machine description
// ---------------------------------------------------------------------------

/// A term appearing in templates, guards, and updates: either a constant or
/// a name that resolves to a binder, an input-bound parameter, or a state
/// variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermDef {
    Const(String),
    Var(String),
}

impl TermDef {
    pub fn cst(name: &str) -> Self {
        TermDef::Const(name.to_string())
    }

    pub fn var(name: &str) -> Self {
        TermDef::Var(name.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateDef {
    pub sig: String,
    pub args: Vec<TermDef>,
}

impl TemplateDef {
    pub fn new(sig: &str, args: Vec<TermDef>) -> Self {
        TemplateDef {
            sig: sig.to_string(),
            args,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionDef {
    /// Emit one label built from the template.
    Output(TemplateDef),
    /// Consume one label matching the template; unknown argument names bind.
    Input(TemplateDef),
    /// Move without producing or consuming a label.
    Silent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardDef {
    Eq(TermDef, TermDef),
    Ne(TermDef, TermDef),
    In(TermDef, String),
    NotIn(TermDef, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateDef {
    Set(String, TermDef),
    Insert(String, TermDef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionDef {
    pub from: String,
    pub to: String,
    /// Explicit nondeterministic choices: name and domain.
    pub binders: Vec<(String, String)>,
    pub guard: Vec<GuardDef>,
    pub action: ActionDef,
    pub updates: Vec<UpdateDef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarKindDef {
    Scalar { init: String },
    SetOf { init: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDef {
    pub name: String,
    pub domain: String,
    pub kind: VarKindDef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineDef {
    pub name: String,
    pub states: Vec<String>,
    pub initial: String,
    pub vars: Vec<VarDef>,
    pub transitions: Vec<TransitionDef>,
}

// ---------------------------------------------------------------------------
// Compiled machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CTerm {
    /// Global constant identity.
    Const(u32),
    /// Environment slot (explicit binder or input-bound parameter).
    Env(usize),
    /// State variable index.
    Var(usize),
}

#[derive(Debug, Clone)]
struct CTemplate {
    sig: usize,
    args: Vec<CTerm>,
}

#[derive(Debug, Clone)]
enum CAction {
    Output(CTemplate),
    Input(CTemplate),
    Silent,
}

#[derive(Debug, Clone, Copy)]
enum CGuard {
    Eq(CTerm, CTerm),
    Ne(CTerm, CTerm),
    In(CTerm, usize),
    NotIn(CTerm, usize),
}

#[derive(Debug, Clone, Copy)]
enum CUpdate {
    Set(usize, CTerm),
    Insert(usize, CTerm),
}

#[derive(Debug, Clone)]
struct CTransition {
    from: u32,
    to: u32,
    /// Environment slot domains, explicit binders first.
    env_domains: Vec<usize>,
    /// Number of leading env slots filled by explicit binder enumeration.
    explicit: usize,
    action: CAction,
    guard: Vec<CGuard>,
    updates: Vec<CUpdate>,
    /// Instantiation count of explicit binders.
    span: u64,
}

#[derive(Debug, Clone)]
struct CVar {
    name: String,
    domain: usize,
    set: bool,
    init: VarValue,
}

/// One machine's full current configuration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MachineState {
    loc: u32,
    vars: Vec<VarValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarValue {
    /// Index into the variable's own domain.
    Scalar(u16),
    Set(BTreeSet<u16>),
}

/// An enabled transition instance matching one concrete label.
#[derive(Debug, Clone)]
struct Engagement {
    transition: usize,
    env: Vec<u32>,
    output: bool,
}

type SeedCache = Mutex<BTreeMap<MachineState, Arc<Vec<(Label, usize, Vec<u32>)>>>>;

/// A machine compiled against a vocabulary, ready for execution.
#[derive(Debug)]
pub struct CompiledMachine {
    name: String,
    vocab: SharedVocabulary,
    locs: Vec<String>,
    initial: u32,
    vars: Vec<CVar>,
    transitions: Vec<CTransition>,
    seeds: SeedCache,
}

struct Compiler<'a> {
    def: &'a MachineDef,
    vocab: &'a SharedVocabulary,
    var_index: BTreeMap<String, usize>,
}

impl<'a> Compiler<'a> {
    fn err_machine(&self) -> String {
        self.def.name.clone()
    }

    fn loc_index(&self, state: &str) -> Result<u32, MachineError> {
        self.def
            .states
            .iter()
            .position(|s| s == state)
            .map(|i| i as u32)
            .ok_or_else(|| MachineError::UnknownState {
                machine: self.err_machine(),
                state: state.to_string(),
            })
    }

    fn domain_index(&self, name: &str) -> Result<usize, MachineError> {
        self.vocab
            .domain_index(name)
            .ok_or_else(|| MachineError::UnknownDomain {
                machine: self.err_machine(),
                domain: name.to_string(),
            })
    }

    fn global_const(&self, name: &str) -> Result<u32, MachineError> {
        self.vocab
            .global_const(name)
            .ok_or_else(|| MachineError::UnknownConstant {
                machine: self.err_machine(),
                constant: name.to_string(),
            })
    }

    /// Every constant name a term can evaluate to, for static domain checks.
    fn term_value_names(
        &self,
        term: &CTerm,
        env_domains: &[usize],
    ) -> Vec<String> {
        match term {
            CTerm::Const(g) => vec![self.vocab.global_name(*g).to_string()],
            CTerm::Env(slot) => self
                .vocab
                .domain(env_domains[*slot])
                .constants
                .clone(),
            CTerm::Var(v) => {
                let domain = self.var_domain(*v);
                self.vocab.domain(domain).constants.clone()
            }
        }
    }

    fn var_domain(&self, var: usize) -> usize {
        let name = self
            .var_index
            .iter()
            .find(|(_, idx)| **idx == var)
            .map(|(n, _)| n.clone())
            .unwrap();
        let def = self.def.vars.iter().find(|v| v.name == name).unwrap();
        self.vocab.domain_index(&def.domain).unwrap()
    }
}

impl MachineDef {
    pub fn compile(&self, vocab: &SharedVocabulary) -> Result<CompiledMachine, MachineError> {
        let machine = self.name.clone();
        let mut seen_states = BTreeSet::new();
        for state in &self.states {
            if !seen_states.insert(state.clone()) {
                return Err(MachineError::DuplicateState {
                    machine,
                    state: state.clone(),
                });
            }
        }

        let mut vars = Vec::new();
        let mut var_index = BTreeMap::new();
        for var in &self.vars {
            if var_index.contains_key(&var.name) {
                return Err(MachineError::DuplicateVar {
                    machine,
                    var: var.name.clone(),
                });
            }
            let domain = vocab
                .domain_index(&var.domain)
                .ok_or_else(|| MachineError::UnknownDomain {
                    machine: machine.clone(),
                    domain: var.domain.clone(),
                })?;
            let init = match &var.kind {
                VarKindDef::Scalar { init } => {
                    let value = vocab.constant_index(domain, init).ok_or_else(|| {
                        MachineError::ConstantOutsideDomain {
                            machine: machine.clone(),
                            constant: init.clone(),
                            domain: var.domain.clone(),
                        }
                    })?;
                    VarValue::Scalar(value)
                }
                VarKindDef::SetOf { init } => {
                    let mut values = BTreeSet::new();
                    for constant in init {
                        let value = vocab.constant_index(domain, constant).ok_or_else(|| {
                            MachineError::ConstantOutsideDomain {
                                machine: machine.clone(),
                                constant: constant.clone(),
                                domain: var.domain.clone(),
                            }
                        })?;
                        values.insert(value);
                    }
                    VarValue::Set(values)
                }
            };
            var_index.insert(var.name.clone(), vars.len());
            vars.push(CVar {
                name: var.name.clone(),
                domain,
                set: matches!(var.kind, VarKindDef::SetOf { .. }),
                init,
            });
        }

        let compiler = Compiler {
            def: self,
            vocab,
            var_index: var_index.clone(),
        };

        let initial = compiler.loc_index(&self.initial)?;

        let mut transitions = Vec::new();
        for t in &self.transitions {
            transitions.push(compile_transition(&compiler, &vars, &var_index, t)?);
        }

        Ok(CompiledMachine {
            name: self.name.clone(),
            vocab: Arc::clone(vocab),
            locs: self.states.clone(),
            initial,
            vars,
            transitions,
            seeds: Mutex::new(BTreeMap::new()),
        })
    }
}

fn compile_transition(
    compiler: &Compiler<'_>,
    vars: &[CVar],
    var_index: &BTreeMap<String, usize>,
    def: &TransitionDef,
) -> Result<CTransition, MachineError> {
    let machine = compiler.err_machine();
    let from = compiler.loc_index(&def.from)?;
    let to = compiler.loc_index(&def.to)?;

    let mut env_domains = Vec::new();
    let mut env_names: BTreeMap<String, usize> = BTreeMap::new();
    for (name, domain) in &def.binders {
        if env_names.contains_key(name) || var_index.contains_key(name) {
            return Err(MachineError::ShadowedBinder {
                machine,
                binder: name.clone(),
            });
        }
        let domain_idx = compiler.domain_index(domain)?;
        env_names.insert(name.clone(), env_domains.len());
        env_domains.push(domain_idx);
    }
    let explicit = env_domains.len();

    let vocab = compiler.vocab;

    let mut resolve_template =
        |tpl: &TemplateDef, allow_fresh: bool| -> Result<CTemplate, MachineError> {
            let sig_idx =
                vocab
                    .sig_index(&tpl.sig)
                    .ok_or_else(|| MachineError::UnknownSignature {
                        machine: machine.clone(),
                        sig: tpl.sig.clone(),
                    })?;
            let decl = vocab.sig(sig_idx);
            if decl.params.len() != tpl.args.len() {
                return Err(MachineError::ArityMismatch {
                    machine: machine.clone(),
                    sig: tpl.sig.clone(),
                    expected: decl.params.len(),
                    got: tpl.args.len(),
                });
            }
            let mut args = Vec::with_capacity(tpl.args.len());
            for (term, (_, param_domain)) in tpl.args.iter().zip(&decl.params) {
                let arg = match term {
                    TermDef::Const(c) => {
                        vocab.constant_index(*param_domain, c).ok_or_else(|| {
                            MachineError::ConstantOutsideDomain {
                                machine: machine.clone(),
                                constant: c.clone(),
                                domain: vocab.domain(*param_domain).name.clone(),
                            }
                        })?;
                        CTerm::Const(vocab.global_const(c).unwrap())
                    }
                    TermDef::Var(name) => {
                        if let Some(slot) = env_names.get(name) {
                            if env_domains[*slot] != *param_domain {
                                return Err(MachineError::BinderDomainMismatch {
                                    machine: machine.clone(),
                                    binder: name.clone(),
                                    binder_domain: vocab.domain(env_domains[*slot]).name.clone(),
                                    param_domain: vocab.domain(*param_domain).name.clone(),
                                });
                            }
                            CTerm::Env(*slot)
                        } else if let Some(var) = var_index.get(name) {
                            if vars[*var].set {
                                return Err(MachineError::NotAScalarVar {
                                    machine: machine.clone(),
                                    var: name.clone(),
                                });
                            }
                            CTerm::Var(*var)
                        } else if allow_fresh {
                            let slot = env_domains.len();
                            env_names.insert(name.clone(), slot);
                            env_domains.push(*param_domain);
                            CTerm::Env(slot)
                        } else {
                            return Err(MachineError::UnboundName {
                                machine: machine.clone(),
                                name: name.clone(),
                            });
                        }
                    }
                };
                args.push(arg);
            }
            Ok(CTemplate { sig: sig_idx, args })
        };

    let action = match &def.action {
        ActionDef::Output(tpl) => CAction::Output(resolve_template(tpl, false)?),
        ActionDef::Input(tpl) => CAction::Input(resolve_template(tpl, true)?),
        ActionDef::Silent => CAction::Silent,
    };

    let resolve_term = |term: &TermDef| -> Result<CTerm, MachineError> {
        match term {
            TermDef::Const(c) => Ok(CTerm::Const(compiler.global_const(c)?)),
            TermDef::Var(name) => {
                if let Some(slot) = env_names.get(name) {
                    Ok(CTerm::Env(*slot))
                } else if let Some(var) = var_index.get(name) {
                    if vars[*var].set {
                        return Err(MachineError::NotAScalarVar {
                            machine: machine.clone(),
                            var: name.clone(),
                        });
                    }
                    Ok(CTerm::Var(*var))
                } else {
                    Err(MachineError::UnboundName {
                        machine: machine.clone(),
                        name: name.clone(),
                    })
                }
            }
        }
    };

    let set_var = |name: &str| -> Result<usize, MachineError> {
        let var = var_index
            .get(name)
            .ok_or_else(|| MachineError::UnboundName {
                machine: machine.clone(),
                name: name.to_string(),
            })?;
        if !vars[*var].set {
            return Err(MachineError::NotASetVar {
                machine: machine.clone(),
                var: name.to_string(),
            });
        }
        Ok(*var)
    };

    let mut guard = Vec::new();
    for g in &def.guard {
        let compiled = match g {
            GuardDef::Eq(a, b) => CGuard::Eq(resolve_term(a)?, resolve_term(b)?),
            GuardDef::Ne(a, b) => CGuard::Ne(resolve_term(a)?, resolve_term(b)?),
            GuardDef::In(t, set) => CGuard::In(resolve_term(t)?, set_var(set)?),
            GuardDef::NotIn(t, set) => CGuard::NotIn(resolve_term(t)?, set_var(set)?),
        };
        guard.push(compiled);
    }

    let mut updates = Vec::new();
    for u in &def.updates {
        let (target, term, insert) = match u {
            UpdateDef::Set(name, term) => {
                let var = var_index
                    .get(name)
                    .ok_or_else(|| MachineError::UnboundName {
                        machine: machine.clone(),
                        name: name.clone(),
                    })?;
                if vars[*var].set {
                    return Err(MachineError::NotAScalarVar {
                        machine: machine.clone(),
                        var: name.clone(),
                    });
                }
                (*var, resolve_term(term)?, false)
            }
            UpdateDef::Insert(name, term) => (set_var(name)?, resolve_term(term)?, true),
        };
        let domain = vars[target].domain;
        let allowed = &vocab.domain(domain).constants;
        for value in compiler.term_value_names(&term, &env_domains) {
            if !allowed.contains(&value) {
                return Err(MachineError::UpdateOutsideDomain {
                    machine: machine.clone(),
                    var: vars[target].name.clone(),
                    domain: vocab.domain(domain).name.clone(),
                });
            }
        }
        updates.push(if insert {
            CUpdate::Insert(target, term)
        } else {
            CUpdate::Set(target, term)
        });
    }

    let span = env_domains[..explicit]
        .iter()
        .map(|d| vocab.domain(*d).constants.len() as u64)
        .product();

    Ok(CTransition {
        from,
        to,
        env_domains,
        explicit,
        action,
        guard,
        updates,
        span,
    })
}

impl CompiledMachine {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vocabulary(&self) -> &SharedVocabulary {
        &self.vocab
    }

    pub fn initial_state(&self) -> MachineState {
        MachineState {
            loc: self.initial,
            vars: self.vars.iter().map(|v| v.init.clone()).collect(),
        }
    }

    pub fn state_name(&self, state: &MachineState) -> &str {
        &self.locs[state.loc as usize]
    }

    fn eval(&self, term: &CTerm, state: &MachineState, env: &[u32]) -> u32 {
        match term {
            CTerm::Const(g) => *g,
            CTerm::Env(slot) => env[*slot],
            CTerm::Var(v) => match &state.vars[*v] {
                VarValue::Scalar(value) => self.vocab.global_of(self.vars[*v].domain, *value),
                VarValue::Set(_) => unreachable!("set variables never appear as scalar terms"),
            },
        }
    }

    fn guard_holds(&self, guard: &[CGuard], state: &MachineState, env: &[u32]) -> bool {
        guard.iter().all(|g| match g {
            CGuard::Eq(a, b) => self.eval(a, state, env) == self.eval(b, state, env),
            CGuard::Ne(a, b) => self.eval(a, state, env) != self.eval(b, state, env),
            CGuard::In(t, var) | CGuard::NotIn(t, var) => {
                let value = self.eval(t, state, env);
                let member = match &state.vars[*var] {
                    VarValue::Set(values) => self
                        .vocab
                        .global_to_domain(value, self.vars[*var].domain)
                        .map_or(false, |idx| values.contains(&idx)),
                    VarValue::Scalar(_) => unreachable!("guard sets are set variables"),
                };
                if matches!(g, CGuard::In(..)) {
                    member
                } else {
                    !member
                }
            }
        })
    }

    /// Instantiates an output template; `None` when a state variable holds a
    /// value the parameter's domain does not carry.
    fn instantiate(
        &self,
        template: &CTemplate,
        state: &MachineState,
        env: &[u32],
    ) -> Option<Label> {
        let decl = self.vocab.sig(template.sig);
        let mut args = Vec::with_capacity(template.args.len());
        for (term, (_, param_domain)) in template.args.iter().zip(&decl.params) {
            let global = self.eval(term, state, env);
            let value = self.vocab.global_to_domain(global, *param_domain)?;
            args.push(value);
        }
        Some(self.vocab.label_from_indices(template.sig, args))
    }

    fn apply(&self, transition: &CTransition, state: &MachineState, env: &[u32]) -> MachineState {
        let mut vars = state.vars.clone();
        for update in &transition.updates {
            match update {
                CUpdate::Set(var, term) => {
                    let global = self.eval(term, state, env);
                    let value = self
                        .vocab
                        .global_to_domain(global, self.vars[*var].domain)
                        .expect("update values are checked against the variable domain");
                    vars[*var] = VarValue::Scalar(value);
                }
                CUpdate::Insert(var, term) => {
                    let global = self.eval(term, state, env);
                    let value = self
                        .vocab
                        .global_to_domain(global, self.vars[*var].domain)
                        .expect("update values are checked against the variable domain");
                    match &mut vars[*var] {
                        VarValue::Set(values) => {
                            values.insert(value);
                        }
                        VarValue::Scalar(_) => unreachable!("insert targets are set variables"),
                    }
                }
            }
        }
        MachineState {
            loc: transition.to,
            vars,
        }
    }

    fn enumerate_env<F: FnMut(&[u32])>(&self, domains: &[usize], mut visit: F) {
        let mut env: Vec<u32> = Vec::with_capacity(domains.len());
        self.enumerate_env_rec(domains, &mut env, &mut visit);
    }

    fn enumerate_env_rec<F: FnMut(&[u32])>(
        &self,
        domains: &[usize],
        env: &mut Vec<u32>,
        visit: &mut F,
    ) {
        if env.len() == domains.len() {
            visit(env);
            return;
        }
        let domain = domains[env.len()];
        for value in 0..self.vocab.domain(domain).constants.len() as u16 {
            env.push(self.vocab.global_of(domain, value));
            self.enumerate_env_rec(domains, env, visit);
            env.pop();
        }
    }

    /// Every enabled output instance at `state`, as (label, transition, env).
    /// `max_span` skips transitions with more instantiations than the bound;
    /// pass `u64::MAX` to enumerate everything.
    fn output_instances(
        &self,
        state: &MachineState,
        max_span: u64,
    ) -> Vec<(Label, usize, Vec<u32>)> {
        let mut out = Vec::new();
        for (tix, transition) in self.transitions.iter().enumerate() {
            if transition.from != state.loc || transition.span > max_span {
                continue;
            }
            let CAction::Output(template) = &transition.action else {
                continue;
            };
            self.enumerate_env(&transition.env_domains, |env| {
                if self.guard_holds(&transition.guard, state, env) {
                    if let Some(label) = self.instantiate(template, state, env) {
                        out.push((label, tix, env.to_vec()));
                    }
                }
            });
        }
        out
    }

    fn seeds(&self, state: &MachineState, max_span: u64) -> Arc<Vec<(Label, usize, Vec<u32>)>> {
        let mut cache = self.seeds.lock().unwrap();
        if let Some(hit) = cache.get(state) {
            return Arc::clone(hit);
        }
        let computed = Arc::new(self.output_instances(state, max_span));
        cache.insert(state.clone(), Arc::clone(&computed));
        computed
    }

    /// Unifies one label against a template at a state, yielding each bound
    /// environment under which the guard holds.
    fn match_template(
        &self,
        transition: &CTransition,
        template: &CTemplate,
        state: &MachineState,
        label: &Label,
    ) -> Vec<Vec<u32>> {
        if template.sig != label.sig_index() {
            return Vec::new();
        }
        let mut env: Vec<Option<u32>> = vec![None; transition.env_domains.len()];
        for (pos, term) in template.args.iter().enumerate() {
            let actual = self.vocab.arg_global(label, pos);
            match term {
                CTerm::Const(g) => {
                    if *g != actual {
                        return Vec::new();
                    }
                }
                CTerm::Var(v) => {
                    let current = match &state.vars[*v] {
                        VarValue::Scalar(value) => {
                            self.vocab.global_of(self.vars[*v].domain, *value)
                        }
                        VarValue::Set(_) => return Vec::new(),
                    };
                    if current != actual {
                        return Vec::new();
                    }
                }
                CTerm::Env(slot) => match env[*slot] {
                    Some(bound) if bound != actual => return Vec::new(),
                    _ => {
                        if self
                            .vocab
                            .global_to_domain(actual, transition.env_domains[*slot])
                            .is_none()
                        {
                            return Vec::new();
                        }
                        env[*slot] = Some(actual);
                    }
                },
            }
        }
        let free: Vec<usize> = (0..env.len()).filter(|i| env[*i].is_none()).collect();
        let free_domains: Vec<usize> = free.iter().map(|i| transition.env_domains[*i]).collect();
        let mut results = Vec::new();
        self.enumerate_env(&free_domains, |fill| {
            let mut full: Vec<u32> = Vec::with_capacity(env.len());
            let mut fill_iter = fill.iter();
            for slot in &env {
                match slot {
                    Some(v) => full.push(*v),
                    None => full.push(*fill_iter.next().unwrap()),
                }
            }
            if self.guard_holds(&transition.guard, state, &full) {
                results.push(full);
            }
        });
        results
    }

    /// All enabled transition instances engaging `label` at `state`.
    fn engagements(&self, state: &MachineState, label: &Label) -> Vec<Engagement> {
        let mut out = Vec::new();
        for (tix, transition) in self.transitions.iter().enumerate() {
            if transition.from != state.loc {
                continue;
            }
            let (template, output) = match &transition.action {
                CAction::Output(t) => (t, true),
                CAction::Input(t) => (t, false),
                CAction::Silent => continue,
            };
            for env in self.match_template(transition, template, state, label) {
                out.push(Engagement {
                    transition: tix,
                    env,
                    output,
                });
            }
        }
        out
    }

    /// Whether any transition of the requested kinds could ever engage the
    /// label, ignoring guards and current state.
    fn declares(&self, label: &Label, outputs: bool, inputs: bool) -> bool {
        self.transitions.iter().any(|transition| {
            let template = match &transition.action {
                CAction::Output(t) if outputs => t,
                CAction::Input(t) if inputs => t,
                _ => return false,
            };
            if template.sig != label.sig_index() {
                return false;
            }
            template.args.iter().enumerate().all(|(pos, term)| {
                let actual = self.vocab.arg_global(label, pos);
                match term {
                    CTerm::Const(g) => *g == actual,
                    CTerm::Var(v) => self
                        .vocab
                        .global_to_domain(actual, self.vars[*v].domain)
                        .is_some(),
                    CTerm::Env(slot) => self
                        .vocab
                        .global_to_domain(actual, transition.env_domains[*slot])
                        .is_some(),
                }
            })
        })
    }

    /// Materializes the label sets the machine can ever emit or consume.
    pub fn declared_labels(&self, outputs: bool, inputs: bool) -> BTreeSet<Label> {
        let mut out = BTreeSet::new();
        for transition in &self.transitions {
            let template = match &transition.action {
                CAction::Output(t) if outputs => t,
                CAction::Input(t) if inputs => t,
                _ => continue,
            };
            let decl = self.vocab.sig(template.sig);
            let mut option_rows: Vec<Vec<u16>> = Vec::new();
            for (term, (_, param_domain)) in template.args.iter().zip(&decl.params) {
                let row: Vec<u16> = match term {
                    CTerm::Const(g) => {
                        vec![self.vocab.global_to_domain(*g, *param_domain).unwrap()]
                    }
                    CTerm::Var(v) => {
                        let var_domain = self.vars[*v].domain;
                        (0..self.vocab.domain(var_domain).constants.len() as u16)
                            .filter_map(|value| {
                                self.vocab.global_to_domain(
                                    self.vocab.global_of(var_domain, value),
                                    *param_domain,
                                )
                            })
                            .collect()
                    }
                    CTerm::Env(slot) => {
                        let env_domain = transition.env_domains[*slot];
                        (0..self.vocab.domain(env_domain).constants.len() as u16)
                            .filter_map(|value| {
                                self.vocab.global_to_domain(
                                    self.vocab.global_of(env_domain, value),
                                    *param_domain,
                                )
                            })
                            .collect()
                    }
                };
                option_rows.push(row);
            }
            let mut combos: Vec<Vec<u16>> = vec![Vec::new()];
            for row in option_rows {
                let mut next = Vec::with_capacity(combos.len() * row.len());
                for combo in &combos {
                    for value in &row {
                        let mut extended = combo.clone();
                        extended.push(*value);
                        next.push(extended);
                    }
                }
                combos = next;
            }
            for args in combos {
                out.insert(self.vocab.label_from_indices(template.sig, args));
            }
        }
        out
    }

    fn silent_steps(&self, state: &MachineState) -> Vec<MachineState> {
        let mut out = Vec::new();
        for transition in &self.transitions {
            if transition.from != state.loc {
                continue;
            }
            if !matches!(transition.action, CAction::Silent) {
                continue;
            }
            self.enumerate_env(&transition.env_domains, |env| {
                if self.guard_holds(&transition.guard, state, env) {
                    out.push(self.apply(transition, state, env));
                }
            });
        }
        out
    }

    /// Singleton events the machine can fire on its own right now, with the
    /// successor state of each instance.
    pub fn enabled_events(&self, state: &MachineState) -> BTreeMap<Event, BTreeSet<MachineState>> {
        let mut out: BTreeMap<Event, BTreeSet<MachineState>> = BTreeMap::new();
        for (label, tix, env) in self.output_instances(state, u64::MAX) {
            let target = self.apply(&self.transitions[tix], state, &env);
            out.entry(Event::singleton(label))
                .or_default()
                .insert(target);
        }
        out
    }
}

fn tau_closure_single(machine: &CompiledMachine, state: &MachineState) -> BTreeSet<MachineState> {
    let mut seen = BTreeSet::from([state.clone()]);
    let mut frontier = vec![state.clone()];
    while let Some(current) = frontier.pop() {
        for next in machine.silent_steps(&current) {
            if seen.insert(next.clone()) {
                frontier.push(next);
            }
        }
    }
    seen
}

/// Unrolls one machine into a process: the alphabet is every label its output
/// templates can produce, and behaviors are its output firings up to `depth`.
/// Input transitions never fire on their own, so a machine with only inputs
/// unrolls to the empty behavior.
pub fn unfold(machine: &CompiledMachine, depth: usize) -> Result<Process, SemanticsError> {
    let alphabet = machine.declared_labels(true, false);
    let mut beh: BTreeSet<Trace> = BTreeSet::from([Trace::empty()]);
    let mut evts: BTreeSet<Event> = BTreeSet::new();
    let mut frontier: Vec<(MachineState, Trace)> = tau_closure_single(machine, &machine.initial_state())
        .into_iter()
        .map(|s| (s, Trace::empty()))
        .collect();
    for _ in 0..depth {
        let mut next = Vec::new();
        for (state, trace) in &frontier {
            for (event, targets) in machine.enabled_events(state) {
                let extended = trace.extended(event.clone());
                evts.insert(event);
                beh.insert(extended.clone());
                for target in targets {
                    for closed in tau_closure_single(machine, &target) {
                        next.push((closed, extended.clone()));
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort();
        next.dedup();
        frontier = next;
    }
    Process::new(alphabet, evts, beh)
}

// ---------------------------------------------------------------------------
// Product of a machine chain under a shared mapping
// ---------------------------------------------------------------------------

/// Joint configuration of every machine in a product.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProductState(Vec<MachineState>);

impl ProductState {
    pub fn components(&self) -> &[MachineState] {
        &self.0
    }
}

type SuccessorMap = BTreeMap<Event, BTreeSet<ProductState>>;

/// The composed operational semantics of a machine chain under one mapping.
///
/// Machines compose left to right; each mapping entry is applied at the first
/// chain boundary separating its source from its target, mirroring chained
/// binary composition of the machines' trace semantics.
pub struct Product {
    vocab: SharedVocabulary,
    machines: Vec<Arc<CompiledMachine>>,
    /// Entries that straddle some boundary, used for image closure.
    active: Mapping,
    /// Mapping slice applied at each boundary (index 1..n).
    boundary_maps: Vec<Mapping>,
    seed_cap: u64,
    successors: Mutex<BTreeMap<ProductState, Arc<SuccessorMap>>>,
}

impl Product {
    pub fn new(
        vocab: SharedVocabulary,
        machines: Vec<Arc<CompiledMachine>>,
        mapping: &Mapping,
    ) -> Result<Self, MachineError> {
        Self::with_seed_cap(vocab, machines, mapping, DEFAULT_SEED_SPAN)
    }

    pub fn with_seed_cap(
        vocab: SharedVocabulary,
        machines: Vec<Arc<CompiledMachine>>,
        mapping: &Mapping,
        seed_cap: u64,
    ) -> Result<Self, MachineError> {
        if machines.is_empty() {
            return Err(MachineError::EmptyProduct);
        }
        let mut names = BTreeSet::new();
        for machine in &machines {
            if !names.insert(machine.name().to_string()) {
                return Err(MachineError::DuplicateMachine(machine.name().to_string()));
            }
        }

        let declares = |upto: usize, label: &Label| -> bool {
            machines[..upto].iter().any(|m| m.declares(label, true, true))
        };

        let mut active = Mapping::empty();
        let mut boundary_maps = vec![Mapping::empty(); machines.len()];
        for (source, target) in mapping.iter() {
            let mut placed_forward = None;
            let mut placed_backward = None;
            for boundary in 1..machines.len() {
                let right = &machines[boundary];
                let forward = declares(boundary, source) && right.declares(target, true, true);
                let backward = declares(boundary, target) && right.declares(source, true, true);
                if forward {
                    placed_forward = Some(boundary);
                    break;
                }
                if backward {
                    placed_backward = Some(boundary);
                    break;
                }
            }
            if let Some(boundary) = placed_forward.or(placed_backward) {
                boundary_maps[boundary].insert(source.clone(), target.clone());
                active.insert(source.clone(), target.clone());
            }
        }

        for (boundary, slice) in boundary_maps.iter().enumerate().skip(1) {
            if slice.is_empty() {
                continue;
            }
            let mut forward = false;
            let mut backward = false;
            for (source, _) in slice.iter() {
                if declares(boundary, source) {
                    forward = true;
                } else {
                    backward = true;
                }
            }
            if forward && backward {
                return Err(MachineError::MixedOrientation { boundary });
            }
        }

        Ok(Product {
            vocab,
            machines,
            active,
            boundary_maps,
            seed_cap,
            successors: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn vocabulary(&self) -> &SharedVocabulary {
        &self.vocab
    }

    pub fn machines(&self) -> &[Arc<CompiledMachine>] {
        &self.machines
    }

    /// Whether any machine can ever emit or consume the label.
    pub fn declares_label(&self, label: &Label) -> bool {
        self.machines.iter().any(|m| m.declares(label, true, true))
    }

    fn tau_closure(&self, state: &ProductState) -> BTreeSet<ProductState> {
        let mut seen = BTreeSet::from([state.clone()]);
        let mut frontier = vec![state.clone()];
        while let Some(current) = frontier.pop() {
            for (idx, machine) in self.machines.iter().enumerate() {
                for stepped in machine.silent_steps(&current.0[idx]) {
                    let mut next = current.0.clone();
                    next[idx] = stepped;
                    let next = ProductState(next);
                    if seen.insert(next.clone()) {
                        frontier.push(next);
                    }
                }
            }
        }
        seen
    }

    /// The initial joint states (silent moves already taken).
    pub fn initial(&self) -> BTreeSet<ProductState> {
        let base = ProductState(
            self.machines
                .iter()
                .map(|m| m.initial_state())
                .collect(),
        );
        self.tau_closure(&base)
    }

    /// Closes a label set under mapping images: whenever a source label is
    /// present its image must ride along.
    fn image_closure(&self, core: &mut BTreeSet<Label>) {
        loop {
            let additions: Vec<Label> = core
                .iter()
                .filter_map(|label| self.active.get(label))
                .filter(|image| !core.contains(*image))
                .cloned()
                .collect();
            if additions.is_empty() {
                return;
            }
            core.extend(additions);
        }
    }

    /// Assigns each label of the candidate event to the machines that must
    /// engage it; `None` when some machine lacks an enabled instance or would
    /// need to engage two labels at once.
    fn engagement_plan(
        &self,
        state: &ProductState,
        core: &BTreeSet<Label>,
    ) -> Option<Vec<Option<(Label, Vec<Engagement>)>>> {
        let mut plan: Vec<Option<(Label, Vec<Engagement>)>> = vec![None; self.machines.len()];
        for label in core {
            for (idx, machine) in self.machines.iter().enumerate() {
                if !machine.declares(label, true, true) {
                    continue;
                }
                match &plan[idx] {
                    Some((engaged, _)) if engaged != label => return None,
                    Some(_) => continue,
                    None => {
                        let options = machine.engagements(&state.0[idx], label);
                        if options.is_empty() {
                            return None;
                        }
                        plan[idx] = Some((label.clone(), options));
                    }
                }
            }
        }
        Some(plan)
    }

    /// Applies the per-boundary synchronization and mapping filters of chained
    /// binary composition to a candidate event.
    fn boundary_filters(&self, event: &Event) -> bool {
        for boundary in 1..self.machines.len() {
            let slice = &self.boundary_maps[boundary];
            let mut left: BTreeSet<Label> = BTreeSet::new();
            let mut right: BTreeSet<Label> = BTreeSet::new();
            for label in event.labels() {
                if self.machines[..boundary]
                    .iter()
                    .any(|m| m.declares(label, true, true))
                {
                    left.insert(label.clone());
                }
                if self.machines[boundary].declares(label, true, true) {
                    right.insert(label.clone());
                }
            }
            let mut level: BTreeSet<Label> = left.union(&right).cloned().collect();
            if level.is_empty() {
                continue;
            }
            let level_event = Event::new(std::mem::take(&mut level)).expect("non-empty level");
            if !cond_prime(&level_event, &left, &right, slice) {
                return false;
            }
            if !condmap(&level_event, slice) {
                return false;
            }
        }
        true
    }

    /// Candidate event cores grown from one seed: the mapped-image closure of
    /// the seed plus every subset of riding source labels whose images are
    /// already aboard.
    fn grow_cores(&self, state: &ProductState, seed: Label) -> BTreeSet<BTreeSet<Label>> {
        let mut collected = BTreeSet::new();
        let mut base = BTreeSet::from([seed]);
        self.image_closure(&mut base);
        let mut stack = vec![base];
        while let Some(core) = stack.pop() {
            if !collected.insert(core.clone()) {
                continue;
            }
            for (source, target) in self.active.iter() {
                if core.contains(target) && !core.contains(source) {
                    let mut extended = core.clone();
                    extended.insert(source.clone());
                    self.image_closure(&mut extended);
                    if self.engagement_plan(state, &extended).is_some() {
                        stack.push(extended);
                    }
                }
            }
        }
        collected
            .into_iter()
            .filter(|core| self.engagement_plan(state, core).is_some())
            .collect()
    }

    fn successors_of_closed(&self, state: &ProductState, out: &mut SuccessorMap) {
        let mut cores: BTreeSet<BTreeSet<Label>> = BTreeSet::new();
        for (idx, machine) in self.machines.iter().enumerate() {
            let _ = idx;
            for (label, _, _) in machine.seeds(&state.0[idx], self.seed_cap).iter() {
                cores.extend(self.grow_cores(state, label.clone()));
            }
        }

        for core in cores {
            let event = Event::new(core.clone()).expect("cores are non-empty");
            if !self.boundary_filters(&event) {
                continue;
            }
            let Some(plan) = self.engagement_plan(state, &core) else {
                continue;
            };
            let engaged: Vec<(usize, Vec<Engagement>)> = plan
                .into_iter()
                .enumerate()
                .filter_map(|(idx, slot)| slot.map(|(_, options)| (idx, options)))
                .collect();
            let mut choice = vec![0usize; engaged.len()];
            loop {
                let has_output = engaged
                    .iter()
                    .zip(&choice)
                    .any(|((_, options), pick)| options[*pick].output);
                if has_output {
                    let mut next = state.0.clone();
                    for ((idx, options), pick) in engaged.iter().zip(&choice) {
                        let engagement = &options[*pick];
                        let machine = &self.machines[*idx];
                        next[*idx] = machine.apply(
                            &machine.transitions[engagement.transition],
                            &state.0[*idx],
                            &engagement.env,
                        );
                    }
                    let targets = self.tau_closure(&ProductState(next));
                    out.entry(event.clone()).or_default().extend(targets);
                }
                let mut pos = engaged.len();
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    choice[pos] += 1;
                    if choice[pos] < engaged[pos].1.len() {
                        break;
                    }
                    choice[pos] = 0;
                }
                if choice.iter().all(|c| *c == 0) {
                    break;
                }
                if engaged.is_empty() {
                    break;
                }
            }
        }
    }

    /// Every event available from `state` (silent moves included), with the
    /// joint successor states it can lead to.
    pub fn successors(&self, state: &ProductState) -> Arc<SuccessorMap> {
        if let Some(hit) = self.successors.lock().unwrap().get(state) {
            return Arc::clone(hit);
        }
        let mut map = SuccessorMap::new();
        for closed in self.tau_closure(state) {
            self.successors_of_closed(&closed, &mut map);
        }
        let map = Arc::new(map);
        self.successors
            .lock()
            .unwrap()
            .insert(state.clone(), Arc::clone(&map));
        map
    }

    /// Materializes the product as a process up to `depth`. Intended for
    /// instances small enough to enumerate exhaustively.
    pub fn as_process(&self, depth: usize) -> Result<Process, SemanticsError> {
        let mut alphabet = BTreeSet::new();
        for machine in &self.machines {
            alphabet.extend(machine.declared_labels(true, true));
        }
        let mut beh: BTreeSet<Trace> = BTreeSet::from([Trace::empty()]);
        let mut evts: BTreeSet<Event> = BTreeSet::new();
        let mut frontier: Vec<(ProductState, Trace)> = self
            .initial()
            .into_iter()
            .map(|s| (s, Trace::empty()))
            .collect();
        for _ in 0..depth {
            let mut next = Vec::new();
            for (state, trace) in &frontier {
                for (event, targets) in self.successors(state).iter() {
                    let extended = trace.extended(event.clone());
                    evts.insert(event.clone());
                    beh.insert(extended.clone());
                    for target in targets {
                        next.push((target.clone(), extended.clone()));
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort();
            next.dedup();
            frontier = next;
        }
        Process::new(alphabet, evts, beh)
    }
}
