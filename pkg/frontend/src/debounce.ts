/** Trailing debounce plus a single-in-flight request queue for sliders. */

export interface Debounced<T extends unknown[]> {
  (...args: T): void;
  cancel(): void;
  flush(): void;
}

/** Delay `fn` until `delayMs` after the last call; later calls win. */
export function debounce<T extends unknown[]>(
  fn: (...args: T) => void,
  delayMs: number,
): Debounced<T> {
  let timer: ReturnType<typeof setTimeout> | null = null;
  let lastArgs: T | null = null;

  const debounced = ((...args: T) => {
    lastArgs = args;
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      const run = lastArgs as T;
      lastArgs = null;
      fn(...run);
    }, delayMs);
  }) as Debounced<T>;

  debounced.cancel = () => {
    if (timer !== null) clearTimeout(timer);
    timer = null;
    lastArgs = null;
  };

  debounced.flush = () => {
    if (timer === null || lastArgs === null) return;
    clearTimeout(timer);
    timer = null;
    const run = lastArgs;
    lastArgs = null;
    fn(...run);
  };

  return debounced;
}

/**
 * Keep at most one request in flight; while busy, only the newest
 * submitted payload is remembered and sent on completion.
 */
export class SingleFlight<T> {
  private busy = false;
  private pending: { payload: T } | null = null;

  constructor(private send: (payload: T) => Promise<void>) {}

  get inFlight(): boolean {
    return this.busy;
  }

  submit(payload: T): void {
    if (this.busy) {
      this.pending = { payload };
      return;
    }
    this.busy = true;
    void this.send(payload)
      .catch(() => {
        /* surfacing errors is the sender's responsibility */
      })
      .finally(() => {
        this.busy = false;
        if (this.pending !== null) {
          const next = this.pending.payload;
          this.pending = null;
          this.submit(next);
        }
      });
  }
}
