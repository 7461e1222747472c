//! A single-threaded task runner for one instance.
//!
//! Tasks are polled with a no-op waker after every delivery and timer tick.
//! They only ever wait on two things, a reply correlated by request id or a
//! point in logical time, so one polling pass per event is enough to make
//! all possible progress.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::future::{poll_fn, Future};
use core::pin::Pin;
use core::task::{Context, Poll, Waker};

use serde_json::{Map, Value};

use crate::wire::{Address, Envelope};

pub(crate) type Task = Pin<Box<dyn Future<Output = ()>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvent {
    pub kind: String,
    pub detail: Value,
}

struct Call {
    deadline: u64,
    reply: Option<Envelope>,
}

pub(crate) struct Rt {
    pub me: Address,
    now: Cell<u64>,
    next_rid: Cell<u64>,
    next_timer: Cell<u64>,
    outbox: RefCell<Vec<Envelope>>,
    calls: RefCell<BTreeMap<u64, Call>>,
    timers: RefCell<BTreeMap<u64, u64>>,
    spawned: RefCell<Vec<Task>>,
    events: RefCell<Vec<NodeEvent>>,
}

impl Rt {
    pub fn new(me: Address, now: u64) -> Self {
        Rt {
            me,
            now: Cell::new(now),
            next_rid: Cell::new(0),
            next_timer: Cell::new(0),
            outbox: RefCell::new(Vec::new()),
            calls: RefCell::new(BTreeMap::new()),
            timers: RefCell::new(BTreeMap::new()),
            spawned: RefCell::new(Vec::new()),
            events: RefCell::new(Vec::new()),
        }
    }

    pub fn now(&self) -> u64 {
        self.now.get()
    }

    pub fn set_now(&self, t: u64) {
        if t > self.now.get() {
            self.now.set(t);
        }
    }

    fn rid(&self) -> u64 {
        let r = self.next_rid.get() + 1;
        self.next_rid.set(r);
        r
    }

    /// Sends a one-way message; returns its request id.
    pub fn send(&self, to: &Address, msg_type: &str, body: Map<String, Value>) -> u64 {
        let rid = self.rid();
        self.outbox.borrow_mut().push(Envelope::new(msg_type, self.me.clone(), to.clone(), rid, body));
        rid
    }

    /// Answers `req`; the reply body carries the request id under `re`.
    pub fn reply(&self, req: &Envelope, msg_type: &str, mut body: Map<String, Value>) {
        body.insert("re".into(), Value::from(req.rid));
        self.send(&req.from, msg_type, body);
    }

    /// Answers a request remembered by sender and request id.
    pub fn reply_raw(&self, to: &Address, re: u64, msg_type: &str, mut body: Map<String, Value>) {
        body.insert("re".into(), Value::from(re));
        self.send(to, msg_type, body);
    }

    /// Routes an incoming reply to its waiting call. Returns false when no
    /// call is waiting (late or duplicate reply).
    pub fn accept_reply(&self, env: Envelope) -> bool {
        let Some(re) = env.reply_to() else { return false };
        match self.calls.borrow_mut().get_mut(&re) {
            Some(call) if call.reply.is_none() => {
                call.reply = Some(env);
                true
            }
            _ => false,
        }
    }

    /// Sends a request and waits for the correlated reply or the timeout.
    pub fn call(
        &self,
        to: &Address,
        msg_type: &str,
        body: Map<String, Value>,
        timeout_ms: u64,
    ) -> impl Future<Output = Option<Envelope>> + '_ {
        let rid = self.send(to, msg_type, body);
        let deadline = self.now() + timeout_ms;
        self.calls.borrow_mut().insert(rid, Call { deadline, reply: None });
        let guard = Forget { map: &self.calls, key: rid };
        poll_fn(move |_| {
            let _ = &guard;
            let mut calls = self.calls.borrow_mut();
            let call = calls.get_mut(&rid).expect("call registered");
            if let Some(env) = call.reply.take() {
                calls.remove(&rid);
                Poll::Ready(Some(env))
            } else if self.now() >= call.deadline {
                calls.remove(&rid);
                Poll::Ready(None)
            } else {
                Poll::Pending
            }
        })
    }

    pub fn sleep(&self, ms: u64) -> impl Future<Output = ()> + '_ {
        self.sleep_until(self.now() + ms)
    }

    pub fn sleep_until(&self, deadline: u64) -> impl Future<Output = ()> + '_ {
        let id = self.next_timer.get() + 1;
        self.next_timer.set(id);
        self.timers.borrow_mut().insert(id, deadline);
        let guard = Forget { map: &self.timers, key: id };
        poll_fn(move |_| {
            let _ = &guard;
            if self.now() >= deadline {
                self.timers.borrow_mut().remove(&id);
                Poll::Ready(())
            } else {
                Poll::Pending
            }
        })
    }

    pub fn spawn(&self, f: impl Future<Output = ()> + 'static) {
        self.spawned.borrow_mut().push(Box::pin(f));
    }

    pub fn event(&self, kind: &str, detail: Value) {
        self.events.borrow_mut().push(NodeEvent { kind: kind.into(), detail });
    }

    /// Earliest future instant at which a waiting task can make progress.
    pub fn next_deadline(&self) -> Option<u64> {
        let now = self.now();
        let calls = self.calls.borrow();
        let timers = self.timers.borrow();
        let pending_calls = calls.values().filter(|c| c.reply.is_none()).map(|c| c.deadline);
        pending_calls.chain(timers.values().copied()).filter(|t| *t > now).min()
    }

    pub fn take_outbox(&self) -> Vec<Envelope> {
        core::mem::take(&mut *self.outbox.borrow_mut())
    }

    pub fn take_events(&self) -> Vec<NodeEvent> {
        core::mem::take(&mut *self.events.borrow_mut())
    }

    fn take_spawned(&self) -> Vec<Task> {
        core::mem::take(&mut *self.spawned.borrow_mut())
    }

    pub fn clear_waits(&self) {
        self.calls.borrow_mut().clear();
        self.timers.borrow_mut().clear();
    }
}

/// Removes a wait registration when its future is dropped unfinished.
struct Forget<'a, V> {
    map: &'a RefCell<BTreeMap<u64, V>>,
    key: u64,
}

impl<V> Drop for Forget<'_, V> {
    fn drop(&mut self) {
        if let Ok(mut m) = self.map.try_borrow_mut() {
            m.remove(&self.key);
        }
    }
}

/// Owns the tasks of one instance and polls them.
pub(crate) struct Runner {
    tasks: BTreeMap<u64, Task>,
    next: u64,
}

impl Runner {
    pub fn new() -> Self {
        Runner { tasks: BTreeMap::new(), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    /// Polls every task once, then keeps polling newly spawned tasks until
    /// none are left unpolled.
    pub fn run(&mut self, rt: &Rt) {
        let mut cx = Context::from_waker(Waker::noop());
        let ids: Vec<u64> = self.tasks.keys().copied().collect();
        for id in ids {
            if let Some(task) = self.tasks.get_mut(&id) {
                if task.as_mut().poll(&mut cx).is_ready() {
                    self.tasks.remove(&id);
                }
            }
        }
        loop {
            let fresh = rt.take_spawned();
            if fresh.is_empty() {
                break;
            }
            for mut task in fresh {
                self.next += 1;
                if task.as_mut().poll(&mut cx).is_pending() {
                    self.tasks.insert(self.next, task);
                }
            }
        }
    }

    pub fn clear(&mut self) {
        self.tasks.clear();
    }
}
