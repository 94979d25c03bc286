//! Insert-only lock-free sorted linked list.
//!
//! Nodes are published with a compare-and-swap on the predecessor's link and
//! are never unlinked, so references handed out stay valid for the lifetime of
//! the list. A failed CAS retries from the same predecessor: since nothing is
//! ever removed, the predecessor is still reachable and still precedes the key.

use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering};

struct Node<K, V> {
    key: K,
    value: V,
    next: AtomicPtr<Node<K, V>>,
}

/// Sorted set of `(key, value)` entries between implicit head (−∞) and tail
/// (+∞) sentinels.
pub struct SortedList<K, V> {
    head: AtomicPtr<Node<K, V>>,
    len: AtomicUsize,
    _owns: PhantomData<Box<Node<K, V>>>,
}

// SAFETY: nodes are only ever reached through `&self`; keys and values are
// shared across threads exactly like the contents of any `Sync` container.
unsafe impl<K: Send, V: Send> Send for SortedList<K, V> {}
unsafe impl<K: Send + Sync, V: Send + Sync> Sync for SortedList<K, V> {}

impl<K, V> Default for SortedList<K, V> {
    fn default() -> Self {
        Self { head: AtomicPtr::new(ptr::null_mut()), len: AtomicUsize::new(0), _owns: PhantomData }
    }
}

impl<K: Ord + Copy, V> SortedList<K, V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the link that should point at `key` and the node it currently
    /// points at (the first node with a key `>= key`, or null).
    fn locate<'a>(&'a self, mut link: &'a AtomicPtr<Node<K, V>>, key: K) -> (&'a AtomicPtr<Node<K, V>>, *mut Node<K, V>) {
        loop {
            let curr = link.load(Ordering::Acquire);
            // SAFETY: published nodes are never freed before the list is dropped.
            match unsafe { curr.as_ref() } {
                Some(node) if node.key < key => link = &node.next,
                _ => return (link, curr),
            }
        }
    }

    pub fn get(&self, key: K) -> Option<&V> {
        let (_, curr) = self.locate(&self.head, key);
        // SAFETY: as in `locate`.
        match unsafe { curr.as_ref() } {
            Some(node) if node.key == key => Some(&node.value),
            _ => None,
        }
    }

    /// Inserts `key` if absent. Returns the entry and whether this call
    /// inserted it. `make` runs at most once; its value is dropped if another
    /// thread wins the race for the same key.
    pub fn get_or_insert_with(&self, key: K, make: impl FnOnce() -> V) -> (&V, bool) {
        let (mut link, mut curr) = self.locate(&self.head, key);
        if let Some(node) = unsafe { curr.as_ref() } {
            if node.key == key {
                return (&node.value, false);
            }
        }
        let fresh = Box::into_raw(Box::new(Node { key, value: make(), next: AtomicPtr::new(curr) }));
        loop {
            // SAFETY: `fresh` is exclusively ours until the CAS publishes it.
            unsafe { (*fresh).next.store(curr, Ordering::Relaxed) };
            match link.compare_exchange(curr, fresh, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => {
                    self.len.fetch_add(1, Ordering::AcqRel);
                    return (unsafe { &(*fresh).value }, true);
                }
                Err(_) => {
                    (link, curr) = self.locate(link, key);
                    if let Some(node) = unsafe { curr.as_ref() } {
                        if node.key == key {
                            // SAFETY: never published, so no other reference exists.
                            drop(unsafe { Box::from_raw(fresh) });
                            return (&node.value, false);
                        }
                    }
                }
            }
        }
    }

    pub fn iter(&self) -> Iter<'_, K, V> {
        Iter { next: self.head.load(Ordering::Acquire), _list: PhantomData }
    }
}

impl<K, V> Drop for SortedList<K, V> {
    fn drop(&mut self) {
        let mut curr = *self.head.get_mut();
        while !curr.is_null() {
            // SAFETY: `&mut self` guarantees no outstanding references.
            let mut node = unsafe { Box::from_raw(curr) };
            curr = *node.next.get_mut();
        }
    }
}

pub struct Iter<'a, K, V> {
    next: *mut Node<K, V>,
    _list: PhantomData<&'a SortedList<K, V>>,
}

impl<'a, K: Copy, V> Iterator for Iter<'a, K, V> {
    type Item = (K, &'a V);

    fn next(&mut self) -> Option<Self::Item> {
        // SAFETY: nodes live as long as the list borrowed for `'a`.
        let node = unsafe { self.next.as_ref() }?;
        self.next = node.next.load(Ordering::Acquire);
        Some((node.key, &node.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn inserts_sorted_and_deduplicates() {
        let list = SortedList::new();
        for k in [5, 1, 9, 3, 5, 1] {
            list.get_or_insert_with(k, || k * 10);
        }
        let keys: Vec<_> = list.iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec![1, 3, 5, 9]);
        assert_eq!(list.len(), 4);
        assert_eq!(list.get(9), Some(&90));
        assert_eq!(list.get(4), None);
        let (v, inserted) = list.get_or_insert_with(3, || 0);
        assert_eq!((*v, inserted), (30, false));
    }

    #[test]
    fn concurrent_inserts_race_to_one_node() {
        let list = Arc::new(SortedList::<u32, usize>::new());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let list = Arc::clone(&list);
                thread::spawn(move || {
                    let mut won = 0;
                    for k in 0..500u32 {
                        // Every thread inserts every key; distinct threads also
                        // interleave in opposite directions.
                        let key = if t % 2 == 0 { k } else { 499 - k };
                        if list.get_or_insert_with(key, || t).1 {
                            won += 1;
                        }
                    }
                    won
                })
            })
            .collect();
        let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(total, 500);
        assert_eq!(list.len(), 500);
        let keys: Vec<_> = list.iter().map(|(k, _)| k).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }
}
