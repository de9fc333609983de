/** Selection state: grouping, ordering, the draft, and its persistence. */

import type { PoolDetail, PoolItem } from "./api.js";

export const SUGGESTED_COUNT = 10;

export type SortMode = "original" | "text" | "style";

export interface PromptGroup {
  promptId: number;
  promptText: string;
  items: PoolItem[];
}

/** Items grouped by prompt, in first-appearance order of the prompts. */
export function groupByPrompt(pool: PoolDetail): PromptGroup[] {
  const groups = new Map<number, PromptGroup>();
  for (const item of pool.items) {
    let g = groups.get(item.prompt_id);
    if (!g) {
      g = { promptId: item.prompt_id, promptText: item.prompt.text, items: [] };
      groups.set(item.prompt_id, g);
    }
    g.items.push(item);
  }
  return [...groups.values()];
}

/** Reorder *within* each group; group order itself never changes. */
export function sortGroups(groups: PromptGroup[], mode: SortMode): PromptGroup[] {
  if (mode === "original") return groups.map((g) => ({ ...g, items: [...g.items] }));
  return groups.map((g) => ({
    ...g,
    items: [...g.items].sort(
      (a, b) => (b.scores[mode] ?? -Infinity) - (a.scores[mode] ?? -Infinity),
    ),
  }));
}

/** Minimal storage surface so tests can substitute a plain object. */
export interface DraftStorage {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

interface DraftJson {
  chosen: string[];
  annotator: string;
}

/** The in-progress selection: a set of item ids plus the annotator name. */
export class SelectionDraft {
  private chosen = new Set<string>();
  annotator = "";

  constructor(
    readonly poolId: string,
    private readonly validIds: ReadonlySet<string>,
    private readonly storage: DraftStorage | null = null,
  ) {
    this.restore();
  }

  private get storageKey(): string {
    return `selection-draft:${this.poolId}`;
  }

  private restore(): void {
    if (!this.storage) return;
    let raw: string | null = null;
    try {
      raw = this.storage.getItem(this.storageKey);
    } catch {
      return; // storage unavailable; start clean
    }
    if (!raw) return;
    try {
      const parsed = JSON.parse(raw) as DraftJson;
      for (const id of parsed.chosen) {
        if (this.validIds.has(id)) this.chosen.add(id); // stale ids are dropped
      }
      this.annotator = typeof parsed.annotator === "string" ? parsed.annotator : "";
    } catch {
      /* corrupt draft; start clean */
    }
  }

  private persist(): void {
    if (!this.storage) return;
    try {
      this.storage.setItem(
        this.storageKey,
        JSON.stringify({ chosen: [...this.chosen], annotator: this.annotator }),
      );
    } catch {
      /* persistence is best-effort */
    }
  }

  toggle(itemId: string): boolean {
    if (!this.validIds.has(itemId)) {
      throw new Error(`unknown item id: ${itemId}`);
    }
    if (this.chosen.has(itemId)) {
      this.chosen.delete(itemId);
    } else {
      this.chosen.add(itemId);
    }
    this.persist();
    return this.chosen.has(itemId);
  }

  setAnnotator(name: string): void {
    this.annotator = name;
    this.persist();
  }

  has(itemId: string): boolean {
    return this.chosen.has(itemId);
  }

  get count(): number {
    return this.chosen.size;
  }

  get ids(): string[] {
    return [...this.chosen].sort();
  }

  get canSubmit(): boolean {
    return this.chosen.size > 0;
  }

  /** Clear after a successful submit so a reload shows the stored state. */
  discard(): void {
    this.chosen.clear();
    if (this.storage) {
      try {
        this.storage.removeItem(this.storageKey);
      } catch {
        /* best-effort */
      }
    }
  }
}

/** Live banner text: running count plus the suggested target. */
export function bannerText(count: number): string {
  return `${count} selected — aim for about ${SUGGESTED_COUNT}`;
}
