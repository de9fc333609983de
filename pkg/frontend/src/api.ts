/** Typed client for the pool/selection HTTP API. */

export interface PromptJson {
  content: string[];
  descriptor: string[] | null;
  negative: boolean;
  text: string;
}

export interface PoolItem {
  item_id: string;
  prompt_id: number;
  prompt: PromptJson;
  scores: Record<string, number>;
  image_url: string;
}

export interface PoolDetail {
  pool_id: string;
  items: PoolItem[];
  reference_url?: string;
  has_selection: boolean;
}

export interface PoolSummary {
  pool_id: string;
  n_items: number;
  n_prompts: number;
  has_reference: boolean;
  has_selection: boolean;
}

export interface SubmitResult {
  pool_id: string;
  count: number;
  item_ids: string[];
  timestamp: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function errorFrom(res: Response): Promise<ApiError> {
  let code = "unknown";
  let message = `request failed with status ${res.status}`;
  try {
    const body = (await res.json()) as { code?: string; message?: string };
    if (body.code) code = body.code;
    if (body.message) message = body.message;
  } catch {
    /* non-JSON error body; keep the generic message */
  }
  return new ApiError(res.status, code, message);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await fetch(this.baseUrl + path);
    if (!res.ok) throw await errorFrom(res);
    return (await res.json()) as T;
  }

  listPools(): Promise<PoolSummary[]> {
    return this.getJson("/api/pools");
  }

  loadPool(poolId: string): Promise<PoolDetail> {
    return this.getJson(`/api/pools/${encodeURIComponent(poolId)}`);
  }

  /** POST the chosen ids; `replace` overwrites an existing selection. */
  async submitSelection(
    poolId: string,
    itemIds: string[],
    annotator: string | null,
    replace = false,
  ): Promise<SubmitResult> {
    const query = replace ? "?replace=true" : "";
    const res = await fetch(
      `${this.baseUrl}/api/pools/${encodeURIComponent(poolId)}/selection${query}`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ chosen: itemIds, annotator }),
      },
    );
    if (!res.ok) throw await errorFrom(res);
    return (await res.json()) as SubmitResult;
  }

  imageUrl(item: PoolItem): string {
    return this.baseUrl + item.image_url;
  }

  referenceUrl(pool: PoolDetail): string | null {
    return pool.reference_url ? this.baseUrl + pool.reference_url : null;
  }
}
