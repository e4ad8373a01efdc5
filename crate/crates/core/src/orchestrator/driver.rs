//! Couples a [`Session`] with its event log under the write-ahead rule.

use super::{Delivery, Effects, Session, SessionError, SessionParams};
use crate::protocol::Envelope;
use crate::store::{EventLog, LogHeader, LogSink, StoreError};

/// Appends every effect batch before handing its deliveries back. After a
/// storage failure the session is halted and all further calls return
/// nothing.
pub struct SessionDriver<S: LogSink> {
    session: Session,
    log: EventLog<S>,
}

impl<S: LogSink> SessionDriver<S> {
    pub fn create(params: SessionParams, now: u64, sink: S) -> Result<(Self, Vec<Delivery>), DriverError> {
        let header = LogHeader::new(&params.session_id, &params.def.experiment_hash(), params.master_seed);
        let (session, fx) = Session::create(params, now)?;
        let log = EventLog::create(sink, &header)?;
        let mut driver = Self { session, log };
        let out = driver.commit(fx, now);
        if driver.log.is_halted() {
            return Err(DriverError::Store(StoreError::Halted));
        }
        Ok((driver, out))
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn log(&self) -> &EventLog<S> {
        &self.log
    }

    pub fn into_parts(self) -> (Session, EventLog<S>) {
        (self.session, self.log)
    }

    pub fn is_halted(&self) -> bool {
        self.log.is_halted()
    }

    fn commit(&mut self, fx: Effects, now: u64) -> Vec<Delivery> {
        if self.log.is_halted() {
            return Vec::new();
        }
        match self.log.append_batch(&fx.events) {
            Ok(()) => fx.deliveries,
            Err(e) => {
                tracing::error!(session = %self.session.id(), error = %e, "halting session");
                self.session.halt(now, &e.to_string())
            }
        }
    }

    /// Fires due timers first so an input never races a passed deadline.
    pub fn handle_input(&mut self, envelope: Envelope, now: u64) -> (Vec<Delivery>, Option<SessionError>) {
        let mut out = self.on_timer(now);
        if self.log.is_halted() {
            return (out, None);
        }
        let fx = self.session.handle_input(envelope, now);
        let rejected = fx.rejected.clone();
        out.extend(self.commit(fx, now));
        (out, rejected)
    }

    /// Runs every timer due at `now`.
    pub fn on_timer(&mut self, now: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while !self.log.is_halted() && self.session.next_deadline().is_some_and(|d| d <= now) {
            let fx = self.session.on_timer(now);
            if fx.events.is_empty() {
                break;
            }
            out.extend(self.commit(fx, now));
        }
        out
    }

    pub fn disconnect(&mut self, role: &str, now: u64) -> Vec<Delivery> {
        let mut out = self.on_timer(now);
        let fx = self.session.disconnect(role, now);
        out.extend(self.commit(fx, now));
        out
    }

    pub fn admin_end(&mut self, reason: &str, now: u64) -> Vec<Delivery> {
        let fx = self.session.admin_end(reason, now);
        self.commit(fx, now)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
