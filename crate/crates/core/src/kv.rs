//! Paged KV-cache accounting.
//!
//! Blocks are bookkeeping entries only: a refcount and a fill level. Forking
//! a table shares every full block and copies the trailing partial block, so
//! a fork allocates at most one block. Releasing a table decrements every
//! refcount and returns blocks that reach zero to the free list.

use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

use crate::error::{AparError, Result};
use crate::tree::SeqId;

pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

/// Logical-to-physical mapping for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTable {
    pub owner: SeqId,
    pub blocks: Vec<BlockId>,
    pub slots_used_in_last_block: usize,
    released: bool,
}

impl BlockTable {
    pub fn new(owner: SeqId) -> Self {
        BlockTable {
            owner,
            blocks: Vec::new(),
            slots_used_in_last_block: 0,
            released: false,
        }
    }

    pub fn cached_tokens(&self, block_size: usize) -> usize {
        match self.blocks.len() {
            0 => 0,
            n => (n - 1) * block_size + self.slots_used_in_last_block,
        }
    }

    pub fn is_released(&self) -> bool {
        self.released
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PoolUsage {
    pub used_blocks: usize,
    pub used_slots: usize,
    pub peak_used: usize,
}

/// Operations an engine needs from a block pool. Every call is atomic.
pub trait BlockManager {
    fn block_size(&self) -> usize;
    fn capacity(&self) -> usize;
    fn free_blocks(&self) -> usize;
    fn usage(&self) -> PoolUsage;

    /// Adds one slot at the end of `table`, allocating a block when the last
    /// one is full.
    fn append_slot(&mut self, table: &mut BlockTable) -> Result<()>;

    /// A child table for the first `prefix_len` cached tokens of `parent`.
    fn fork_prefix(&mut self, parent: &BlockTable, prefix_len: usize, owner: SeqId) -> Result<BlockTable>;

    fn release(&mut self, table: &mut BlockTable) -> Result<usize>;

    fn fork_table(&mut self, parent: &BlockTable, owner: SeqId) -> Result<BlockTable> {
        let len = parent.cached_tokens(self.block_size());
        self.fork_prefix(parent, len, owner)
    }
}

#[derive(Clone, Debug)]
pub struct KvBlockPool {
    block_size: usize,
    capacity: usize,
    refcount: Vec<u32>,
    filled: Vec<u32>,
    free_list: Vec<BlockId>,
    used_slots: usize,
    peak_used: usize,
}

impl KvBlockPool {
    pub fn new(capacity: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(AparError::invalid("block size must be positive"));
        }
        Ok(KvBlockPool {
            block_size,
            capacity,
            refcount: vec![0; capacity],
            filled: vec![0; capacity],
            // Popped from the back, so block 0 is handed out first.
            free_list: (0..capacity as u32).rev().map(BlockId).collect(),
            used_slots: 0,
            peak_used: 0,
        })
    }

    pub fn used_blocks(&self) -> usize {
        self.capacity - self.free_list.len()
    }

    pub fn refcount(&self, block: BlockId) -> u32 {
        self.refcount[block.0 as usize]
    }

    fn allocate(&mut self) -> Result<BlockId> {
        let b = self.free_list.pop().ok_or(AparError::Capacity {
            requested: 1,
            free: 0,
        })?;
        self.refcount[b.0 as usize] = 1;
        self.filled[b.0 as usize] = 0;
        self.peak_used = self.peak_used.max(self.used_blocks());
        Ok(b)
    }

    fn decref(&mut self, b: BlockId) -> bool {
        let i = b.0 as usize;
        debug_assert!(self.refcount[i] > 0);
        self.refcount[i] -= 1;
        if self.refcount[i] == 0 {
            self.used_slots -= self.filled[i] as usize;
            self.filled[i] = 0;
            self.free_list.push(b);
            true
        } else {
            false
        }
    }

    /// Blocks needed to build a fresh table holding `tokens` slots.
    pub fn blocks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.block_size)
    }
}

impl BlockManager for KvBlockPool {
    fn block_size(&self) -> usize {
        self.block_size
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn free_blocks(&self) -> usize {
        self.free_list.len()
    }

    fn usage(&self) -> PoolUsage {
        PoolUsage {
            used_blocks: self.used_blocks(),
            used_slots: self.used_slots,
            peak_used: self.peak_used,
        }
    }

    fn append_slot(&mut self, table: &mut BlockTable) -> Result<()> {
        if table.released {
            return Err(AparError::protocol(format!(
                "append to released table of sequence {}",
                table.owner
            )));
        }
        if table.blocks.is_empty() || table.slots_used_in_last_block == self.block_size {
            let b = self.allocate()?;
            table.blocks.push(b);
            table.slots_used_in_last_block = 0;
        }
        let last = *table.blocks.last().expect("table has a block");
        debug_assert_eq!(
            self.refcount[last.0 as usize],
            1,
            "partial blocks are never shared"
        );
        table.slots_used_in_last_block += 1;
        self.filled[last.0 as usize] += 1;
        self.used_slots += 1;
        Ok(())
    }

    fn fork_prefix(&mut self, parent: &BlockTable, prefix_len: usize, owner: SeqId) -> Result<BlockTable> {
        if parent.released {
            return Err(AparError::protocol(format!(
                "fork from released table of sequence {}",
                parent.owner
            )));
        }
        let bs = self.block_size;
        if prefix_len > parent.cached_tokens(bs) {
            return Err(AparError::protocol(format!(
                "fork prefix {prefix_len} exceeds cached length {}",
                parent.cached_tokens(bs)
            )));
        }
        let full = prefix_len / bs;
        let partial = prefix_len % bs;
        let copy = if partial > 0 {
            Some(self.allocate().map_err(|_| AparError::Capacity {
                requested: 1,
                free: self.free_list.len(),
            })?)
        } else {
            None
        };
        let mut child = BlockTable::new(owner);
        for &b in &parent.blocks[..full] {
            self.refcount[b.0 as usize] += 1;
            child.blocks.push(b);
        }
        child.slots_used_in_last_block = if full > 0 { bs } else { 0 };
        if let Some(c) = copy {
            self.filled[c.0 as usize] = partial as u32;
            self.used_slots += partial;
            child.blocks.push(c);
            child.slots_used_in_last_block = partial;
        }
        Ok(child)
    }

    fn release(&mut self, table: &mut BlockTable) -> Result<usize> {
        if std::mem::replace(&mut table.released, true) {
            return Err(AparError::protocol(format!(
                "double release of sequence {}",
                table.owner
            )));
        }
        let mut freed = 0;
        for b in std::mem::take(&mut table.blocks) {
            if self.decref(b) {
                freed += 1;
            }
        }
        table.slots_used_in_last_block = 0;
        Ok(freed)
    }
}

/// A pool shared by several engines. Each operation takes the lock once.
#[derive(Clone, Debug)]
pub struct SharedPool(Arc<Mutex<KvBlockPool>>);

impl SharedPool {
    pub fn new(pool: KvBlockPool) -> Self {
        SharedPool(Arc::new(Mutex::new(pool)))
    }

    pub fn lock(&self) -> MutexGuard<'_, KvBlockPool> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl BlockManager for SharedPool {
    fn block_size(&self) -> usize {
        self.lock().block_size
    }

    fn capacity(&self) -> usize {
        self.lock().capacity
    }

    fn free_blocks(&self) -> usize {
        self.lock().free_blocks()
    }

    fn usage(&self) -> PoolUsage {
        self.lock().usage()
    }

    fn append_slot(&mut self, table: &mut BlockTable) -> Result<()> {
        self.lock().append_slot(table)
    }

    fn fork_prefix(&mut self, parent: &BlockTable, prefix_len: usize, owner: SeqId) -> Result<BlockTable> {
        self.lock().fork_prefix(parent, prefix_len, owner)
    }

    fn release(&mut self, table: &mut BlockTable) -> Result<usize> {
        self.lock().release(table)
    }
}
