/** Pure selection-state logic: grouping, sorting, the draft, persistence. */

import { describe, expect, it } from "vitest";

import {
  bannerText,
  groupByPrompt,
  SelectionDraft,
  sortGroups,
  SUGGESTED_COUNT,
} from "../src/state.js";
import { makeItem, makePool, MemoryStorage } from "./helpers.js";

describe("groupByPrompt", () => {
  it("splits 12 items over 3 prompts into 3 groups of 4", () => {
    const groups = groupByPrompt(makePool(3, 4));
    expect(groups.map((g) => g.items.length)).toEqual([4, 4, 4]);
    expect(groups.map((g) => g.promptId)).toEqual([0, 1, 2]);
    expect(groups[0]!.promptText).toBe("prompt 0");
  });

  it("keeps first-appearance order even when prompts interleave", () => {
    const pool = makePool(2, 2);
    pool.items = [pool.items[2]!, pool.items[0]!, pool.items[3]!, pool.items[1]!];
    const groups = groupByPrompt(pool);
    expect(groups.map((g) => g.promptId)).toEqual([1, 0]);
    expect(groups[0]!.items.map((i) => i.item_id)).toEqual(["it-1-0", "it-1-1"]);
  });
});

describe("sortGroups", () => {
  it("reorders within each group only, never across groups", () => {
    const groups = groupByPrompt(makePool(3, 4));
    const sorted = sortGroups(groups, "text");
    expect(sorted.map((g) => g.promptId)).toEqual(groups.map((g) => g.promptId));
    for (const [gi, group] of sorted.entries()) {
      const scores = group.items.map((i) => i.scores["text"]!);
      const descending = [...scores].sort((a, b) => b - a);
      expect(scores).toEqual(descending);
      const originalIds = new Set(groups[gi]!.items.map((i) => i.item_id));
      expect(new Set(group.items.map((i) => i.item_id))).toEqual(originalIds);
    }
  });

  it("original mode preserves pool order and does not mutate input", () => {
    const groups = groupByPrompt(makePool(2, 3));
    const before = groups.map((g) => g.items.map((i) => i.item_id));
    sortGroups(groups, "style");
    const after = sortGroups(groups, "original");
    expect(after.map((g) => g.items.map((i) => i.item_id))).toEqual(before);
    expect(groups.map((g) => g.items.map((i) => i.item_id))).toEqual(before);
  });
});

describe("SelectionDraft", () => {
  const validIds = new Set(["a", "b", "c"]);

  it("toggles membership and reports count and sorted ids", () => {
    const draft = new SelectionDraft("p", validIds);
    expect(draft.canSubmit).toBe(false);
    expect(draft.toggle("b")).toBe(true);
    expect(draft.toggle("a")).toBe(true);
    expect(draft.count).toBe(2);
    expect(draft.ids).toEqual(["a", "b"]);
    expect(draft.canSubmit).toBe(true);
    expect(draft.toggle("b")).toBe(false);
    expect(draft.ids).toEqual(["a"]);
  });

  it("rejects ids outside the pool", () => {
    const draft = new SelectionDraft("p", validIds);
    expect(() => draft.toggle("zz")).toThrow(/unknown item id/);
  });

  it("survives a reload via storage until discarded", () => {
    const storage = new MemoryStorage();
    const first = new SelectionDraft("p", validIds, storage);
    first.toggle("a");
    first.toggle("c");
    first.setAnnotator("pat");

    const reloaded = new SelectionDraft("p", validIds, storage);
    expect(reloaded.ids).toEqual(["a", "c"]);
    expect(reloaded.annotator).toBe("pat");

    reloaded.discard();
    const afterSubmit = new SelectionDraft("p", validIds, storage);
    expect(afterSubmit.count).toBe(0);
  });

  it("keeps drafts of different pools separate", () => {
    const storage = new MemoryStorage();
    new SelectionDraft("p1", validIds, storage).toggle("a");
    const other = new SelectionDraft("p2", validIds, storage);
    expect(other.count).toBe(0);
  });

  it("drops stored ids that no longer exist in the pool", () => {
    const storage = new MemoryStorage();
    const first = new SelectionDraft("p", new Set(["a", "b", "gone"]), storage);
    first.toggle("a");
    first.toggle("gone");
    const reloaded = new SelectionDraft("p", validIds, storage);
    expect(reloaded.ids).toEqual(["a"]);
  });

  it("starts clean on a corrupt stored draft", () => {
    const storage = new MemoryStorage();
    storage.setItem("selection-draft:p", "{not json");
    const draft = new SelectionDraft("p", validIds, storage);
    expect(draft.count).toBe(0);
  });
});

describe("bannerText", () => {
  it("shows the live count and the suggested target", () => {
    expect(bannerText(3)).toContain("3 selected");
    expect(bannerText(3)).toContain(String(SUGGESTED_COUNT));
  });
});

describe("fixtures", () => {
  it("makeItem produces the service item shape", () => {
    const item = makeItem("x", 1, 0.5, 0.25);
    expect(item.scores).toEqual({ text: 0.5, style: 0.25 });
    expect(item.prompt.text).toBe("prompt 1");
  });
});
