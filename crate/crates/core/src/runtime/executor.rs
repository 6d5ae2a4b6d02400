//! Single-threaded executor with its own clock.
//!
//! Tasks are polled in wake order and timers fire in (deadline, registration)
//! order, so a run is a pure function of its inputs. The clock only moves
//! when a timer fires or the driver advances it.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use crate::domain::Timestamp;

pub type LocalBoxFuture<'a, T> = Pin<Box<dyn Future<Output = T> + 'a>>;

#[derive(Default)]
struct ReadyQueue {
    order: VecDeque<u64>,
    queued: HashSet<u64>,
}

struct TaskWaker {
    id: u64,
    ready: Arc<Mutex<ReadyQueue>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref()
    }

    fn wake_by_ref(self: &Arc<Self>) {
        let mut q = self.ready.lock().expect("ready queue poisoned");
        if q.queued.insert(self.id) {
            q.order.push_back(self.id);
        }
    }
}

pub(crate) struct Executor {
    tasks: RefCell<BTreeMap<u64, LocalBoxFuture<'static, ()>>>,
    next_task: Cell<u64>,
    ready: Arc<Mutex<ReadyQueue>>,
    timers: RefCell<BinaryHeap<Reverse<(Timestamp, u64)>>>,
    timer_wakers: RefCell<HashMap<u64, Waker>>,
    next_timer: Cell<u64>,
    now: Cell<Timestamp>,
}

impl Executor {
    pub fn new(start: Timestamp) -> Self {
        Executor {
            tasks: RefCell::new(BTreeMap::new()),
            next_task: Cell::new(0),
            ready: Arc::new(Mutex::new(ReadyQueue::default())),
            timers: RefCell::new(BinaryHeap::new()),
            timer_wakers: RefCell::new(HashMap::new()),
            next_timer: Cell::new(0),
            now: Cell::new(start),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now.get()
    }

    pub fn set_now(&self, t: Timestamp) {
        if t > self.now.get() {
            self.now.set(t);
        }
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        let id = self.next_task.get();
        self.next_task.set(id + 1);
        self.tasks.borrow_mut().insert(id, Box::pin(fut));
        let mut q = self.ready.lock().expect("ready queue poisoned");
        q.queued.insert(id);
        q.order.push_back(id);
    }

    pub fn task_count(&self) -> usize {
        self.tasks.borrow().len()
    }

    /// Polls woken tasks until none are ready.
    pub fn run_ready(&self) {
        loop {
            let id = {
                let mut q = self.ready.lock().expect("ready queue poisoned");
                match q.order.pop_front() {
                    Some(id) => {
                        q.queued.remove(&id);
                        id
                    }
                    None => return,
                }
            };
            let Some(mut fut) = self.tasks.borrow_mut().remove(&id) else {
                continue;
            };
            let waker = Waker::from(Arc::new(TaskWaker { id, ready: self.ready.clone() }));
            let mut cx = Context::from_waker(&waker);
            if fut.as_mut().poll(&mut cx).is_pending() {
                self.tasks.borrow_mut().insert(id, fut);
            }
        }
    }

    fn register_timer(&self, deadline: Timestamp, waker: Waker) -> u64 {
        let seq = self.next_timer.get();
        self.next_timer.set(seq + 1);
        self.timers.borrow_mut().push(Reverse((deadline, seq)));
        self.timer_wakers.borrow_mut().insert(seq, waker);
        seq
    }

    fn update_timer(&self, seq: u64, waker: &Waker) {
        if let Some(w) = self.timer_wakers.borrow_mut().get_mut(&seq) {
            if !w.will_wake(waker) {
                *w = waker.clone();
            }
        }
    }

    fn cancel_timer(&self, seq: u64) {
        self.timer_wakers.borrow_mut().remove(&seq);
    }

    /// Earliest live timer deadline.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let mut timers = self.timers.borrow_mut();
        let wakers = self.timer_wakers.borrow();
        while let Some(Reverse((deadline, seq))) = timers.peek().copied() {
            if wakers.contains_key(&seq) {
                return Some(deadline);
            }
            timers.pop();
        }
        None
    }

    /// Fires the earliest live timer if it is due at or before `limit`,
    /// moving the clock to its deadline.
    pub fn fire_next_timer(&self, limit: Option<Timestamp>) -> bool {
        let Some(deadline) = self.next_deadline() else {
            return false;
        };
        if limit.is_some_and(|l| deadline > l) {
            return false;
        }
        let Reverse((_, seq)) = self.timers.borrow_mut().pop().expect("peeked timer");
        let waker = self.timer_wakers.borrow_mut().remove(&seq);
        self.set_now(deadline);
        if let Some(w) = waker {
            w.wake();
        }
        true
    }

    /// Runs tasks and fires timers up to and including `target`, then sets
    /// the clock to `target`.
    pub fn advance_to(&self, target: Timestamp) {
        loop {
            self.run_ready();
            if !self.fire_next_timer(Some(target)) {
                break;
            }
        }
        self.set_now(target);
        self.run_ready();
    }

    /// Runs until no task is ready and no timer is pending.
    pub fn run_until_idle(&self) {
        loop {
            self.run_ready();
            if !self.fire_next_timer(None) {
                break;
            }
        }
    }

    /// Runs until `done` returns true or the system goes idle. Returns the
    /// final value of `done`.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> bool {
        loop {
            self.run_ready();
            if done() {
                return true;
            }
            if !self.fire_next_timer(None) {
                return done();
            }
        }
    }
}

/// Future returned by [`super::Runtime::sleep_until`].
pub struct Sleep {
    exec: Rc<Executor>,
    deadline: Timestamp,
    timer: Option<u64>,
}

impl Sleep {
    pub(crate) fn new(exec: Rc<Executor>, deadline: Timestamp) -> Self {
        Sleep { exec, deadline, timer: None }
    }
}

impl Future for Sleep {
    type Output = ();
    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.exec.now() >= self.deadline {
            if let Some(seq) = self.timer.take() {
                self.exec.cancel_timer(seq);
            }
            return Poll::Ready(());
        }
        match self.timer {
            Some(seq) => self.exec.update_timer(seq, cx.waker()),
            None => {
                let seq = self.exec.register_timer(self.deadline, cx.waker().clone());
                self.timer = Some(seq);
            }
        }
        Poll::Pending
    }
}

impl Drop for Sleep {
    fn drop(&mut self) {
        if let Some(seq) = self.timer.take() {
            self.exec.cancel_timer(seq);
        }
    }
}

/// Yields once, letting other ready tasks run at the same instant.
pub struct YieldNow(bool);

impl YieldNow {
    pub fn new() -> Self {
        YieldNow(false)
    }
}

impl Future for YieldNow {
    type Output = ();
    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.0 {
            Poll::Ready(())
        } else {
            self.0 = true;
            cx.waker().wake_by_ref();
            Poll::Pending
        }
    }
}

#[derive(Default)]
struct Waiter {
    granted: Cell<bool>,
    waker: RefCell<Option<Waker>>,
}

/// FIFO counting semaphore for tasks on one executor. Released permits are
/// handed directly to the longest waiter.
pub struct Semaphore {
    permits: Cell<u32>,
    waiters: RefCell<VecDeque<Rc<Waiter>>>,
}

impl Semaphore {
    pub fn new(permits: u32) -> Rc<Self> {
        Rc::new(Semaphore { permits: Cell::new(permits), waiters: RefCell::new(VecDeque::new()) })
    }

    pub fn try_acquire(self: &Rc<Self>) -> Option<Permit> {
        if self.permits.get() > 0 && self.waiters.borrow().is_empty() {
            self.permits.set(self.permits.get() - 1);
            Some(Permit { sem: self.clone() })
        } else {
            None
        }
    }

    pub fn acquire(self: &Rc<Self>) -> Acquire {
        Acquire { sem: self.clone(), waiter: None }
    }

    fn release(&self) {
        let next = self.waiters.borrow_mut().pop_front();
        match next {
            Some(w) => {
                w.granted.set(true);
                if let Some(waker) = w.waker.borrow_mut().take() {
                    waker.wake();
                }
            }
            None => self.permits.set(self.permits.get() + 1),
        }
    }
}

pub struct Permit {
    sem: Rc<Semaphore>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        self.sem.release();
    }
}

pub struct Acquire {
    sem: Rc<Semaphore>,
    waiter: Option<Rc<Waiter>>,
}

impl Future for Acquire {
    type Output = Permit;
    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Permit> {
        if let Some(w) = &self.waiter {
            if w.granted.get() {
                self.waiter = None;
                return Poll::Ready(Permit { sem: self.sem.clone() });
            }
            *w.waker.borrow_mut() = Some(cx.waker().clone());
            return Poll::Pending;
        }
        if let Some(p) = self.sem.try_acquire() {
            return Poll::Ready(p);
        }
        let w = Rc::new(Waiter::default());
        *w.waker.borrow_mut() = Some(cx.waker().clone());
        self.sem.waiters.borrow_mut().push_back(w.clone());
        self.waiter = Some(w);
        Poll::Pending
    }
}

impl Drop for Acquire {
    fn drop(&mut self) {
        if let Some(w) = self.waiter.take() {
            if w.granted.get() {
                self.sem.release();
            } else {
                self.sem.waiters.borrow_mut().retain(|x| !Rc::ptr_eq(x, &w));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn timers_fire_in_deadline_then_registration_order() {
        let exec = Rc::new(Executor::new(Timestamp::EPOCH));
        let log = Rc::new(RefCell::new(Vec::new()));
        for (name, ms) in [("b", 2000u64), ("a", 1000), ("c", 2000)] {
            let e = exec.clone();
            let l = log.clone();
            exec.spawn(async move {
                Sleep::new(e.clone(), Timestamp::from_micros(ms * 1000)).await;
                l.borrow_mut().push((name, e.now().as_micros()));
            });
        }
        exec.advance_to(Timestamp::from_secs(3));
        assert_eq!(*log.borrow(), vec![("a", 1_000_000), ("b", 2_000_000), ("c", 2_000_000)]);
        assert_eq!(exec.now(), Timestamp::from_secs(3));
    }

    #[test]
    fn advance_stops_at_target() {
        let exec = Rc::new(Executor::new(Timestamp::EPOCH));
        let fired = Rc::new(Cell::new(false));
        let (e, f) = (exec.clone(), fired.clone());
        exec.spawn(async move {
            Sleep::new(e, Timestamp::from_secs(5)).await;
            f.set(true);
        });
        exec.advance_to(Timestamp::from_secs(4));
        assert!(!fired.get());
        exec.advance_to(Timestamp::from_secs(5));
        assert!(fired.get());
    }

    #[test]
    fn semaphore_is_fifo() {
        let exec = Rc::new(Executor::new(Timestamp::EPOCH));
        let sem = Semaphore::new(1);
        let order = Rc::new(RefCell::new(Vec::new()));
        for i in 0..4 {
            let (e, s, o) = (exec.clone(), sem.clone(), order.clone());
            exec.spawn(async move {
                let _p = s.acquire().await;
                o.borrow_mut().push((i, e.now().as_micros()));
                let t = e.now() + Duration::from_secs(1);
                Sleep::new(e, t).await;
            });
        }
        exec.run_until_idle();
        assert_eq!(*order.borrow(), vec![(0, 0), (1, 1_000_000), (2, 2_000_000), (3, 3_000_000)]);
        assert!(sem.try_acquire().is_some());
    }

    #[test]
    fn dropped_sleep_does_not_move_clock() {
        let exec = Rc::new(Executor::new(Timestamp::EPOCH));
        {
            let mut s = Box::pin(Sleep::new(exec.clone(), Timestamp::from_secs(10)));
            let waker = Waker::noop();
            let mut cx = Context::from_waker(waker);
            assert!(s.as_mut().poll(&mut cx).is_pending());
        }
        exec.run_until_idle();
        assert_eq!(exec.now(), Timestamp::EPOCH);
    }
}
