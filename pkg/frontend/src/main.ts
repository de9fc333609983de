/** Entry point: route on the ?pool= query parameter. */

import { ApiClient } from "./api.js";
import { renderPool, renderPoolList } from "./render.js";

export async function boot(root: HTMLElement, client = new ApiClient()): Promise<void> {
  const doc = root.ownerDocument;
  const win = doc.defaultView;
  const params = new URLSearchParams(win?.location.search ?? "");
  const poolId = params.get("pool");
  const storage = ((): Storage | null => {
    try {
      return win?.localStorage ?? null;
    } catch {
      return null;
    }
  })();
  if (poolId) {
    await renderPool(root, client, poolId, storage);
  } else {
    await renderPoolList(root, client);
  }
}

const rootEl = typeof document !== "undefined" ? document.getElementById("app") : null;
if (rootEl) {
  void boot(rootEl);
}
