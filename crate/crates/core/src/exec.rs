//! Single-threaded executor for simulated tasks.
//!
//! Tasks are plain futures that share the [`World`] through [`Sim`]. Time only
//! moves when every task is blocked: the executor then fires the earliest of
//! the next fabric event and the next timer (fabric first on ties).
//! Never hold a `World` borrow across an `.await`.

use std::cell::{Cell, RefCell, RefMut};
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use thiserror::Error;

use crate::simcore::{Nanos, SimClock};
use crate::world::{WaitKey, World};

type Task = Pin<Box<dyn Future<Output = ()>>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("deadlock at t={now}ns: tasks blocked with no pending events")]
    Stalled { now: Nanos },
    #[error("event budget of {budget} exhausted at t={now}ns")]
    Budget { budget: u64, now: Nanos },
}

struct TaskWaker {
    id: usize,
    ready: Arc<Mutex<VecDeque<usize>>>,
    /// Set while the task sits in the ready queue, so repeated wakes
    /// (one per registration) enqueue it once.
    queued: AtomicBool,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready.lock().expect("ready queue").push_back(self.id);
        }
    }
}

struct Inner {
    world: RefCell<World>,
    timers: RefCell<SimClock<Waker>>,
    tasks: RefCell<Vec<Option<Task>>>,
    wakers: RefCell<Vec<Arc<TaskWaker>>>,
    live: Cell<usize>,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

/// Shared handle to a running simulation.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim")
            .field("now", &self.now())
            .field("live_tasks", &self.inner.live.get())
            .finish()
    }
}

impl Sim {
    pub fn new(world: World) -> Self {
        Self {
            inner: Rc::new(Inner {
                world: RefCell::new(world),
                timers: RefCell::new(SimClock::new()),
                tasks: RefCell::new(Vec::new()),
                wakers: RefCell::new(Vec::new()),
                live: Cell::new(0),
                ready: Arc::new(Mutex::new(VecDeque::new())),
            }),
        }
    }

    pub fn world(&self) -> RefMut<'_, World> {
        self.inner.world.borrow_mut()
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.inner.world.borrow_mut())
    }

    pub fn now(&self) -> Nanos {
        self.inner.world.borrow().fabric.now()
    }

    /// Consumes the simulation and returns the world (all handles must be dropped).
    pub fn into_world(self) -> World {
        self.inner.tasks.borrow_mut().clear();
        match Rc::try_unwrap(self.inner) {
            Ok(inner) => inner.world.into_inner(),
            Err(_) => panic!("Sim handles still alive"),
        }
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        let mut tasks = self.inner.tasks.borrow_mut();
        let id = tasks.len();
        tasks.push(Some(Box::pin(fut)));
        let waker = Arc::new(TaskWaker {
            id,
            ready: self.inner.ready.clone(),
            queued: AtomicBool::new(false),
        });
        waker.wake_by_ref();
        self.inner.wakers.borrow_mut().push(waker);
        self.inner.live.set(self.inner.live.get() + 1);
    }

    /// Spawns `fut` and returns a slot that receives its output.
    pub fn spawn_with_result<T: 'static>(
        &self,
        fut: impl Future<Output = T> + 'static,
    ) -> Rc<RefCell<Option<T>>> {
        let slot = Rc::new(RefCell::new(None));
        let s = slot.clone();
        self.spawn(async move {
            let v = fut.await;
            *s.borrow_mut() = Some(v);
        });
        slot
    }

    /// Runs `main` to completion; other tasks may still be pending afterwards.
    pub fn run<T: 'static>(&self, main: impl Future<Output = T> + 'static) -> Result<T, ExecError> {
        let slot = self.spawn_with_result(main);
        self.drive(|| slot.borrow().is_some())?;
        let v = slot.borrow_mut().take().expect("main finished");
        Ok(v)
    }

    /// Runs until no task can make progress and no events are pending.
    pub fn run_until_idle(&self) -> Result<Nanos, ExecError> {
        match self.drive(|| false) {
            Ok(()) | Err(ExecError::Stalled { .. }) => Ok(self.now()),
            Err(e) => Err(e),
        }
    }

    /// Runs until simulated time reaches `t` or everything is idle.
    pub fn run_until(&self, t: Nanos) -> Result<(), ExecError> {
        let me = self.clone();
        let r = self.drive(move || me.next_time().is_none_or(|n| n > t) && me.ready_empty());
        match r {
            Ok(()) | Err(ExecError::Stalled { .. }) => {}
            Err(e) => return Err(e),
        }
        if self.now() < t {
            self.with(|w| w.fabric.advance_to(t));
        }
        Ok(())
    }

    fn ready_empty(&self) -> bool {
        self.inner.ready.lock().expect("ready queue").is_empty()
    }

    fn next_time(&self) -> Option<Nanos> {
        let tf = self.inner.world.borrow().fabric.next_event_time();
        let tt = self.inner.timers.borrow().peek_time();
        match (tf, tt) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn poll_ready(&self) {
        loop {
            let next = self.inner.ready.lock().expect("ready queue").pop_front();
            let Some(id) = next else { break };
            let task = self.inner.tasks.borrow_mut()[id].take();
            let Some(mut task) = task else { continue };
            let tw = self.inner.wakers.borrow()[id].clone();
            tw.queued.store(false, Ordering::Release);
            let waker = Waker::from(tw);
            let mut cx = Context::from_waker(&waker);
            match task.as_mut().poll(&mut cx) {
                Poll::Ready(()) => self.inner.live.set(self.inner.live.get() - 1),
                Poll::Pending => self.inner.tasks.borrow_mut()[id] = Some(task),
            }
        }
    }

    fn drive(&self, mut done: impl FnMut() -> bool) -> Result<(), ExecError> {
        let budget = self.inner.world.borrow().fabric.cost.event_budget;
        let mut steps = 0u64;
        loop {
            self.poll_ready();
            if done() {
                return Ok(());
            }
            if !self.ready_empty() {
                continue;
            }
            let tf = self.inner.world.borrow().fabric.next_event_time();
            let tt = self.inner.timers.borrow().peek_time();
            steps += 1;
            if steps > budget {
                return Err(ExecError::Budget {
                    budget,
                    now: self.now(),
                });
            }
            match (tf, tt) {
                (None, None) => {
                    return if self.inner.live.get() == 0 {
                        Ok(())
                    } else {
                        Err(ExecError::Stalled { now: self.now() })
                    };
                }
                (Some(a), b) if b.is_none_or(|b| a <= b) => {
                    self.inner.world.borrow_mut().step();
                }
                (_, Some(b)) => {
                    let mut w = self.inner.world.borrow_mut();
                    if b > w.fabric.now() {
                        w.fabric.advance_to(b);
                    }
                    drop(w);
                    let (_, w) = self.inner.timers.borrow_mut().pop().expect("timer");
                    w.wake();
                }
                _ => unreachable!(),
            }
        }
    }

    fn add_timer(&self, at: Nanos, waker: Waker) {
        self.inner.timers.borrow_mut().schedule_at(at, waker);
    }

    pub fn sleep(&self, d: Nanos) -> Sleep {
        Sleep {
            sim: self.clone(),
            deadline: self.now() + d,
            armed: false,
        }
    }

    pub fn sleep_until(&self, t: Nanos) -> Sleep {
        Sleep {
            sim: self.clone(),
            deadline: t,
            armed: false,
        }
    }

    /// Resolves once `cond` holds; re-checked whenever `key` is notified.
    pub fn wait_until<F>(&self, key: WaitKey, cond: F) -> WaitUntil<F>
    where
        F: FnMut(&mut World) -> bool,
    {
        self.wait_until_any(vec![key], cond)
    }

    /// Resolves once `cond` holds; re-checked whenever any of `keys` is notified.
    pub fn wait_until_any<F>(&self, keys: Vec<WaitKey>, cond: F) -> WaitUntil<F>
    where
        F: FnMut(&mut World) -> bool,
    {
        WaitUntil {
            sim: self.clone(),
            keys,
            cond,
            deadline: None,
            armed: false,
        }
    }

    /// Like [`Sim::wait_until`] but gives up at `deadline`; yields whether `cond` held.
    pub fn wait_until_or_timeout<F>(&self, key: WaitKey, deadline: Nanos, cond: F) -> WaitUntil<F>
    where
        F: FnMut(&mut World) -> bool,
    {
        WaitUntil {
            sim: self.clone(),
            keys: vec![key],
            cond,
            deadline: Some(deadline),
            armed: false,
        }
    }
}

pub struct Sleep {
    sim: Sim,
    deadline: Nanos,
    armed: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.sim.now() >= self.deadline {
            return Poll::Ready(());
        }
        if !self.armed {
            self.armed = true;
            self.sim.add_timer(self.deadline, cx.waker().clone());
        }
        Poll::Pending
    }
}

pub struct WaitUntil<F> {
    sim: Sim,
    keys: Vec<WaitKey>,
    cond: F,
    deadline: Option<Nanos>,
    armed: bool,
}

impl<F: FnMut(&mut World) -> bool + Unpin> Future for WaitUntil<F> {
    type Output = bool;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<bool> {
        let this = &mut *self;
        let ok = {
            let mut w = this.sim.world();
            (this.cond)(&mut w)
        };
        if ok {
            return Poll::Ready(true);
        }
        if let Some(d) = this.deadline {
            if this.sim.now() >= d {
                return Poll::Ready(false);
            }
            if !this.armed {
                this.sim.add_timer(d, cx.waker().clone());
            }
        }
        this.armed = true;
        let mut w = this.sim.world();
        for k in &this.keys {
            w.register(*k, cx.waker().clone());
        }
        Poll::Pending
    }
}

/// Polls all futures until each completes; outputs in input order.
pub async fn join_all<T, Fut: Future<Output = T>>(futs: Vec<Fut>) -> Vec<T> {
    let mut futs: Vec<Pin<Box<Fut>>> = futs.into_iter().map(Box::pin).collect();
    let mut out: Vec<Option<T>> = futs.iter().map(|_| None).collect();
    std::future::poll_fn(move |cx| {
        let mut pending = false;
        for (f, o) in futs.iter_mut().zip(out.iter_mut()) {
            if o.is_none() {
                match f.as_mut().poll(cx) {
                    Poll::Ready(v) => *o = Some(v),
                    Poll::Pending => pending = true,
                }
            }
        }
        if pending {
            Poll::Pending
        } else {
            Poll::Ready(out.iter_mut().map(|o| o.take().expect("done")).collect())
        }
    })
    .await
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::config::CostModel;
    use crate::world::WorldConfig;

    #[test]
    fn joined_waiters_on_one_key_stay_linear() {
        let sim = Sim::new(World::new(WorldConfig::new(CostModel::default(), 1)));
        let counter = Rc::new(Cell::new(0u32));
        let polls = Rc::new(Cell::new(0u32));
        let (c, p, s) = (counter.clone(), polls.clone(), sim.clone());
        sim.spawn(async move {
            let futs = (1..=32u32)
                .map(|k| {
                    let (c, p) = (c.clone(), p.clone());
                    s.wait_until(WaitKey::Control(0), move |_| {
                        p.set(p.get() + 1);
                        c.get() >= k
                    })
                })
                .collect();
            join_all(futs).await;
        });
        for _ in 0..32 {
            let (c, s) = (counter.clone(), sim.clone());
            sim.spawn(async move {
                s.sleep(10).await;
                c.set(c.get() + 1);
                s.with(|w| w.notify(WaitKey::Control(0)));
            });
            sim.run_until_idle().unwrap();
        }
        assert_eq!(counter.get(), 32);
        // one poll per pending waiter per notify, at most
        assert!(polls.get() <= 32 * 33, "{} polls", polls.get());
    }
}
