/** DOM layer: pool view, selection controls, submit flow. */

import { ApiClient, ApiError } from "./api.js";
import type { PoolDetail, PoolItem, PoolSummary } from "./api.js";
import {
  bannerText,
  groupByPrompt,
  SelectionDraft,
  sortGroups,
  type DraftStorage,
  type SortMode,
} from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Landing page: one link per pool on the service. */
export async function renderPoolList(root: HTMLElement, client: ApiClient): Promise<void> {
  const doc = root.ownerDocument;
  root.textContent = "";
  let pools: PoolSummary[];
  try {
    pools = await client.listPools();
  } catch (err) {
    root.append(el(doc, "p", "error-state", describeError(err)));
    return;
  }
  root.append(el(doc, "h1", undefined, "Candidate pools"));
  if (pools.length === 0) {
    root.append(el(doc, "p", "empty-state", "No pools on the service yet."));
    return;
  }
  const list = el(doc, "ul", "pool-list");
  for (const pool of pools) {
    const row = el(doc, "li", "pool-row");
    const link = el(doc, "a", "pool-link", pool.pool_id);
    link.href = `?pool=${encodeURIComponent(pool.pool_id)}`;
    const note = `${pool.n_items} items, ${pool.n_prompts} prompts` +
      (pool.has_selection ? " — selection submitted" : "");
    row.append(link, el(doc, "span", "pool-note", ` ${note}`));
    list.append(row);
  }
  root.append(list);
}

export interface PoolViewHandles {
  draft: SelectionDraft;
  setSort(mode: SortMode): void;
  submit(replace?: boolean): Promise<void>;
}

/**
 * Render one pool: sticky reference panel, prompt groups, selection banner,
 * submit button. Returns handles that the tests (and main) drive directly.
 */
export async function renderPool(
  root: HTMLElement,
  client: ApiClient,
  poolId: string,
  storage: DraftStorage | null,
): Promise<PoolViewHandles | null> {
  const doc = root.ownerDocument;
  root.textContent = "";

  let pool: PoolDetail;
  try {
    pool = await client.loadPool(poolId);
  } catch (err) {
    if (err instanceof ApiError && err.status === 404) {
      const missing = el(doc, "div", "missing-state");
      missing.append(
        el(doc, "h1", undefined, "Pool not found"),
        el(doc, "p", undefined, `No pool named “${poolId}” on the service.`),
      );
      root.append(missing);
    } else {
      root.append(el(doc, "p", "error-state", describeError(err)));
    }
    return null;
  }

  const validIds = new Set(pool.items.map((it) => it.item_id));
  const draft = new SelectionDraft(poolId, validIds, storage);
  let sortMode: SortMode = "original";

  // --- header -------------------------------------------------------------
  const header = el(doc, "header", "pool-header");
  header.append(el(doc, "h1", undefined, `Pool ${pool.pool_id}`));
  const promptCount = new Set(pool.items.map((it) => it.prompt_id)).size;
  header.append(
    el(doc, "p", "pool-summary", `${pool.items.length} candidates across ${promptCount} prompts`),
  );
  if (pool.has_selection) {
    header.append(
      el(doc, "p", "already-selected",
        "A selection is already stored for this pool; submitting again needs replace."),
    );
  }
  root.append(header);

  // --- sticky reference panel --------------------------------------------
  const refPanel = el(doc, "aside", "reference-panel");
  refPanel.append(el(doc, "h2", undefined, "Reference"));
  const refUrl = client.referenceUrl(pool);
  if (refUrl) {
    const img = el(doc, "img", "reference-image");
    img.src = refUrl;
    img.alt = "style reference";
    refPanel.append(img);
  } else {
    refPanel.append(el(doc, "p", "no-reference", "No reference image for this pool."));
  }
  root.append(refPanel);

  // --- controls: sort + banner -------------------------------------------
  const controls = el(doc, "div", "controls");
  const sortLabel = el(doc, "label", "sort-label", "Order within each prompt: ");
  const sortSelect = el(doc, "select", "sort-select");
  for (const [value, label] of [
    ["original", "pool order"],
    ["text", "text score"],
    ["style", "style score"],
  ] as const) {
    const opt = el(doc, "option", undefined, label);
    opt.value = value;
    sortSelect.append(opt);
  }
  sortLabel.append(sortSelect);
  controls.append(sortLabel);

  const banner = el(doc, "p", "selection-banner", bannerText(draft.count));
  controls.append(banner);
  root.append(controls);

  // --- item groups --------------------------------------------------------
  const groupsHost = el(doc, "main", "groups");
  root.append(groupsHost);

  const cards = new Map<string, HTMLElement>();

  function renderCard(item: PoolItem): HTMLElement {
    const card = el(doc, "article", "item-card");
    card.dataset["itemId"] = item.item_id;
    const img = el(doc, "img", "item-thumb");
    img.src = client.imageUrl(item);
    img.alt = item.prompt.text;
    const scores = el(
      doc,
      "p",
      "item-scores",
      `text ${item.scores["text"]?.toFixed(3) ?? "–"} · style ${item.scores["style"]?.toFixed(3) ?? "–"}`,
    );
    card.append(img, el(doc, "p", "item-prompt", item.prompt.text), scores);
    card.addEventListener("click", () => {
      draft.toggle(item.item_id);
      syncSelection();
    });
    cards.set(item.item_id, card);
    return card;
  }

  function renderGroups(): void {
    groupsHost.textContent = "";
    cards.clear();
    for (const group of sortGroups(groupByPrompt(pool), sortMode)) {
      const section = el(doc, "section", "prompt-group");
      section.dataset["promptId"] = String(group.promptId);
      section.append(el(doc, "h2", "prompt-title", group.promptText));
      const grid = el(doc, "div", "item-grid");
      for (const item of group.items) grid.append(renderCard(item));
      section.append(grid);
      groupsHost.append(section);
    }
    syncSelection();
  }

  // --- submit row ---------------------------------------------------------
  const footer = el(doc, "footer", "submit-row");
  const annotatorLabel = el(doc, "label", "annotator-label", "Annotator: ");
  const annotatorInput = el(doc, "input", "annotator-input");
  annotatorInput.type = "text";
  annotatorInput.placeholder = "your name";
  annotatorInput.value = draft.annotator;
  annotatorInput.addEventListener("input", () => draft.setAnnotator(annotatorInput.value));
  annotatorLabel.append(annotatorInput);
  const submitButton = el(doc, "button", "submit-button", "Submit selection");
  const status = el(doc, "p", "submit-status");
  footer.append(annotatorLabel, submitButton, status);
  root.append(footer);

  function syncSelection(): void {
    for (const [id, card] of cards) {
      card.classList.toggle("selected", draft.has(id));
    }
    banner.textContent = bannerText(draft.count);
    submitButton.disabled = !draft.canSubmit;
  }

  async function submit(replace = false): Promise<void> {
    if (!draft.canSubmit) return; // blocked client-side at 0 selected
    submitButton.disabled = true;
    status.className = "submit-status";
    status.textContent = "Submitting…";
    try {
      const result = await client.submitSelection(
        poolId,
        draft.ids,
        draft.annotator || "anonymous",
        replace,
      );
      draft.discard();
      status.classList.add("success");
      status.textContent = `Stored ${result.count} selections for ${result.pool_id}.`;
      syncSelection();
    } catch (err) {
      status.classList.add("error");
      if (err instanceof ApiError && err.status === 409) {
        status.textContent = err.message; // server wording, verbatim
        openReplaceDialog(err.message);
      } else if (err instanceof ApiError) {
        status.textContent = err.message; // 400 etc., verbatim, retry stays open
      } else {
        status.textContent = describeError(err);
      }
      submitButton.disabled = !draft.canSubmit; // allow retry
    }
  }

  function openReplaceDialog(message: string): void {
    root.querySelector(".replace-dialog")?.remove();
    const dialog = el(doc, "div", "replace-dialog");
    dialog.append(
      el(doc, "p", "replace-message", message),
      el(doc, "p", undefined, "Replace the stored selection with the current one?"),
    );
    const confirm = el(doc, "button", "replace-confirm", "Replace");
    const cancel = el(doc, "button", "replace-cancel", "Keep stored");
    confirm.addEventListener("click", () => {
      dialog.remove();
      void submit(true);
    });
    cancel.addEventListener("click", () => dialog.remove());
    dialog.append(confirm, cancel);
    root.append(dialog);
  }

  submitButton.addEventListener("click", () => void submit(false));
  sortSelect.addEventListener("change", () => {
    sortMode = sortSelect.value as SortMode;
    renderGroups();
  });

  renderGroups();

  return {
    draft,
    setSort(mode: SortMode): void {
      sortMode = mode;
      sortSelect.value = mode;
      renderGroups();
    },
    submit,
  };
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return `${err.status}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}
