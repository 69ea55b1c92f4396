//! Scripted user programs.
//!
//! A program is a flat list of instructions. Only `Sys` instructions are
//! kernel work: each one is a single micro-step (two for `yield`). The
//! other instructions are register shuffling and control flow and run for
//! free on the way to the next syscall.

use std::collections::BTreeMap;

pub const NUM_REGS: usize = 4;

pub type Reg = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Imm(i64),
    Reg(Reg),
    /// Return value of the last syscall.
    Ret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cond {
    pub lhs: Operand,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl Cond {
    pub fn ret_eq(v: i64) -> Self {
        Cond { lhs: Operand::Ret, op: CmpOp::Eq, rhs: Operand::Imm(v) }
    }

    pub fn ret_ne(v: i64) -> Self {
        Cond { lhs: Operand::Ret, op: CmpOp::Ne, rhs: Operand::Imm(v) }
    }

    pub fn ret_neg() -> Self {
        Cond { lhs: Operand::Ret, op: CmpOp::Lt, rhs: Operand::Imm(0) }
    }

    pub fn reg_eq(r: Reg, v: i64) -> Self {
        Cond { lhs: Operand::Reg(r), op: CmpOp::Eq, rhs: Operand::Imm(v) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Call {
    Fork,
    ThreadFork,
    Wait,
    Vanish,
    Exit(Operand),
    Yield(Operand),
    GetTid,
    GetTicks,
    NewPages { base: u32, len: u32 },
    RemovePages { base: u32 },
    ReadFile { file: String, buf: u32, len: u32, offset: u32 },
    /// Console output; `value` is appended to the text when present.
    Print { text: String, value: Option<Operand> },
}

impl Call {
    pub fn name(&self) -> &'static str {
        match self {
            Call::Fork => "fork",
            Call::ThreadFork => "thread_fork",
            Call::Wait => "wait",
            Call::Vanish => "vanish",
            Call::Exit(_) => "exit",
            Call::Yield(_) => "yield",
            Call::GetTid => "gettid",
            Call::GetTicks => "getticks",
            Call::NewPages { .. } => "new_pages",
            Call::RemovePages { .. } => "remove_pages",
            Call::ReadFile { .. } => "readfile",
            Call::Print { .. } => "print",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    Sys(Call),
    Set(Reg, Operand),
    Add(Reg, i64),
    Branch { cond: Cond, to: usize },
    Jump(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub instrs: Vec<Instr>,
}

impl Program {
    pub fn get(&self, pc: usize) -> Option<&Instr> {
        self.instrs.get(pc)
    }
}

enum Pending {
    Done(Instr),
    Branch(Cond, String),
    Jump(String),
}

/// Builds a [`Program`] with symbolic labels.
pub struct ProgramBuilder {
    name: String,
    items: Vec<Pending>,
    labels: BTreeMap<String, usize>,
}

impl ProgramBuilder {
    pub fn new(name: &str) -> Self {
        ProgramBuilder { name: name.to_string(), items: Vec::new(), labels: BTreeMap::new() }
    }

    pub fn label(&mut self, name: &str) -> &mut Self {
        let prev = self.labels.insert(name.to_string(), self.items.len());
        assert!(prev.is_none(), "duplicate label {name}");
        self
    }

    pub fn sys(&mut self, call: Call) -> &mut Self {
        self.items.push(Pending::Done(Instr::Sys(call)));
        self
    }

    pub fn print(&mut self, text: &str) -> &mut Self {
        self.sys(Call::Print { text: text.to_string(), value: None })
    }

    pub fn set(&mut self, reg: Reg, value: Operand) -> &mut Self {
        self.items.push(Pending::Done(Instr::Set(reg, value)));
        self
    }

    pub fn add(&mut self, reg: Reg, delta: i64) -> &mut Self {
        self.items.push(Pending::Done(Instr::Add(reg, delta)));
        self
    }

    pub fn branch(&mut self, cond: Cond, label: &str) -> &mut Self {
        self.items.push(Pending::Branch(cond, label.to_string()));
        self
    }

    pub fn jump(&mut self, label: &str) -> &mut Self {
        self.items.push(Pending::Jump(label.to_string()));
        self
    }

    pub fn build(&mut self) -> Program {
        let resolve = |l: &String| -> usize {
            *self.labels.get(l).unwrap_or_else(|| panic!("unknown label {l}"))
        };
        let instrs = self
            .items
            .iter()
            .map(|p| match p {
                Pending::Done(i) => i.clone(),
                Pending::Branch(c, l) => Instr::Branch { cond: *c, to: resolve(l) },
                Pending::Jump(l) => Instr::Jump(resolve(l)),
            })
            .collect();
        Program { name: self.name.clone(), instrs }
    }
}
