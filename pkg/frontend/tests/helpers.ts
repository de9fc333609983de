/** Shared fixtures for the UI tests. */

import type { PoolDetail, PoolItem } from "../src/api.js";

export function makeItem(
  id: string,
  promptId: number,
  text: number,
  style: number,
): PoolItem {
  return {
    item_id: id,
    prompt_id: promptId,
    prompt: {
      content: ["a", "circle"],
      descriptor: ["frost"],
      negative: false,
      text: `prompt ${promptId}`,
    },
    scores: { text, style },
    image_url: `/api/images/${id}.png`,
  };
}

/** nPrompts groups of perPrompt items with distinct, unsorted scores. */
export function makePool(nPrompts: number, perPrompt: number): PoolDetail {
  const items: PoolItem[] = [];
  for (let p = 0; p < nPrompts; p += 1) {
    for (let i = 0; i < perPrompt; i += 1) {
      // text scores deliberately not in pool order so sorting visibly reorders
      const text = ((i * 7 + p * 3) % 10) / 10;
      const style = ((i * 3 + p) % 10) / 10;
      items.push(makeItem(`it-${p}-${i}`, p, text, style));
    }
  }
  return {
    pool_id: "pool-a",
    items,
    reference_url: "/api/reference/pool-a.png",
    has_selection: false,
  };
}

/** In-memory stand-in for localStorage. */
export class MemoryStorage {
  private map = new Map<string, string>();

  getItem(key: string): string | null {
    return this.map.has(key) ? this.map.get(key)! : null;
  }

  setItem(key: string, value: string): void {
    this.map.set(key, value);
  }

  removeItem(key: string): void {
    this.map.delete(key);
  }
}
